#include "ctefm/providers.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

#include "ctefm/corpus.hpp"
#include "ctefm/dsp.hpp"

namespace ctefm {

namespace {

Matrix seeded_gaussian(std::uint64_t seed, Eigen::Index rows, Eigen::Index cols,
                       double scale) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal() * scale;
  }
  return m;
}

// Pooled log-mel of a fixed internal set of synthetic voices. Subtracting it
// removes the spectrum shape shared by all speech-like signals, so embedding
// geometry reflects speaker differences rather than common structure.
Matrix anchor_pooled_logmel(const MelConfig& cfg) {
  static std::mutex mutex;
  static std::map<std::tuple<int, int, int, int>, Matrix> cache;
  const auto key = std::make_tuple(cfg.n_mels, cfg.n_fft, cfg.win_length, cfg.hop_length);
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  constexpr std::uint64_t kAnchorSeed = 0xA17C404;
  constexpr int kVoices = 12;
  Matrix anchor = Matrix::Zero(1, cfg.n_mels);
  for (int k = 0; k < kVoices; ++k) {
    Utterance utt;
    utt.id = "anchor";
    utt.samples = render_utterance(make_speaker(kAnchorSeed, k),
                                   Rng::derive(kAnchorSeed, Rng::hash_str("anchor-utt"), k), 1.0);
    anchor += compute_mel(utt, cfg).frames.colwise().mean() / kVoices;
  }
  cache[key] = anchor;
  return anchor;
}

// Two passes of a (0.25, 0.5, 0.25) kernel across mel bins, as one matrix.
// Pooling this way makes embeddings insensitive to harmonic comb shifts from
// small pitch changes while keeping the spectral envelope.
Matrix spectral_smoother(int n_mels) {
  Matrix k = Matrix::Zero(n_mels, n_mels);
  for (int i = 0; i < n_mels; ++i) {
    const int lo = std::max(0, i - 1);
    const int hi = std::min(n_mels - 1, i + 1);
    k(i, i) += 0.5;
    k(lo, i) += 0.25;
    k(hi, i) += 0.25;
  }
  return k * k;
}

}  // namespace

SyntheticContentProvider::SyntheticContentProvider(std::uint64_t seed, int dim,
                                                   double frame_rate)
    : seed_(seed), dim_(dim), frame_rate_(frame_rate) {
  if (dim < 1 || frame_rate <= 0.0) {
    throw std::runtime_error("content provider needs dim >= 1 and frame_rate > 0");
  }
  projection_ = seeded_gaussian(Rng::derive(seed_, Rng::hash_str("content-proj")),
                                n_bands_, dim_, 1.0 / std::sqrt(double(n_bands_)));
}

ContentFeatures SyntheticContentProvider::extract(const Utterance& utt) const {
  utt.validate();
  const int hop = static_cast<int>(std::lround(utt.sample_rate / frame_rate_));
  const int win = 2 * hop;
  const int n_fft = 1024;
  const auto t1 = static_cast<Eigen::Index>(
      std::max<std::size_t>(1, utt.samples.size() * static_cast<std::size_t>(frame_rate_) /
                                   static_cast<std::size_t>(utt.sample_rate)));

  const auto window = hann_window(win);
  const auto bank = mel_filterbank(n_bands_, n_fft, utt.sample_rate, 50.0, 7800.0);
  const auto n = static_cast<std::ptrdiff_t>(utt.samples.size());

  Matrix bands(t1, n_bands_);
  std::vector<double> frame(static_cast<std::size_t>(win));
  for (Eigen::Index t = 0; t < t1; ++t) {
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t) * hop;
    for (int i = 0; i < win; ++i) {
      const std::ptrdiff_t s = start + i;
      frame[static_cast<std::size_t>(i)] =
          (s < n) ? utt.samples[static_cast<std::size_t>(s)] * window[static_cast<std::size_t>(i)]
                  : 0.0;
    }
    const auto spec = power_spectrum(frame, n_fft);
    for (int b = 0; b < n_bands_; ++b) {
      double e = 0.0;
      const auto& filt = bank[static_cast<std::size_t>(b)];
      for (std::size_t k = 0; k < spec.size(); ++k) e += filt[k] * spec[k];
      bands(t, b) = std::log(e + 1e-10);
    }
  }

  // z-score along time so per-speaker spectral coloration mostly cancels
  for (int b = 0; b < n_bands_; ++b) {
    const double mu = bands.col(b).mean();
    const double sd = std::sqrt((bands.col(b).array() - mu).square().mean());
    bands.col(b) = (bands.col(b).array() - mu) / (sd + 1e-3);
  }

  ContentFeatures out;
  out.frame_rate = frame_rate_;
  out.frames = (bands * projection_).array().tanh().matrix();
  return out;
}

SyntheticSpeakerProvider::SyntheticSpeakerProvider(std::string id, std::uint64_t seed,
                                                   int dim, MelConfig mel_cfg)
    : id_(std::move(id)), seed_(seed), dim_(dim), mel_cfg_(mel_cfg) {
  if (dim < 2) throw std::runtime_error("speaker provider needs dim >= 2");
  anchor_ = anchor_pooled_logmel(mel_cfg_);
  w1_ = seeded_gaussian(Rng::derive(seed_, Rng::hash_str("sv-w1")), mel_cfg_.n_mels, dim_,
                        1.0 / std::sqrt(double(mel_cfg_.n_mels)));
  smooth_ = spectral_smoother(mel_cfg_.n_mels);
  anchor_ = anchor_ * smooth_;
  w2_ = seeded_gaussian(Rng::derive(seed_, Rng::hash_str("sv-w2")), dim_, dim_,
                        1.0 / std::sqrt(double(dim_)));
}

nn::Var SyntheticSpeakerProvider::embed_mel(nn::Tape& tape, nn::Var mel) const {
  if (mel.cols() != mel_cfg_.n_mels) {
    throw std::runtime_error("embed_mel: expected " + std::to_string(mel_cfg_.n_mels) +
                             " mel bins, got " + std::to_string(mel.cols()));
  }
  using namespace nn;
  Var pooled = matmul(mean_over_rows(mel), tape.constant(smooth_));  // [1 x n_mels]
  Var whitened = sub_rowvec(pooled, tape.constant(anchor_));
  Var centered = sub_rowvec(whitened, scale_by(
      tape.constant(Matrix::Ones(1, mel.cols())), mean_all(whitened)));
  Var x = tanh_(scale(centered, 1.0 / 4.5));
  Var h = gelu(matmul(x, tape.constant(w1_)));
  Var e = matmul(h, tape.constant(w2_));               // [1 x dim]
  Var inv_norm = rsqrt_eps(sum_all(mul(e, e)), 1e-12);
  return scale_by(e, inv_norm);
}

Vector SyntheticSpeakerProvider::embed_mel_plain(const Matrix& mel) const {
  nn::Tape tape;
  nn::Var v = embed_mel(tape, tape.constant(mel));
  return v.val().row(0).transpose();
}

TimbreEmbedding SyntheticSpeakerProvider::embed(const Utterance& utt) const {
  const MelSpectrogram mel = compute_mel(utt, mel_cfg_);
  TimbreEmbedding emb;
  emb.provider_id = id_;
  emb.vector = embed_mel_plain(mel.frames);
  return emb;
}

nlohmann::json RegistryConfig::to_json() const {
  nlohmann::json j;
  j["content_seed"] = content_seed;
  j["content_dim"] = content_dim;
  j["content_frame_rate"] = content_frame_rate;
  j["sv_seeds"] = sv_seeds;
  j["sv_dims"] = sv_dims;
  j["mel"] = {{"n_fft", mel.n_fft},         {"win_length", mel.win_length},
              {"hop_length", mel.hop_length}, {"n_mels", mel.n_mels},
              {"fmin", mel.fmin},           {"fmax", mel.fmax},
              {"log_floor", mel.log_floor}};
  return j;
}

RegistryConfig RegistryConfig::from_json(const nlohmann::json& j) {
  RegistryConfig cfg;
  cfg.content_seed = j.at("content_seed").get<std::uint64_t>();
  cfg.content_dim = j.at("content_dim").get<int>();
  cfg.content_frame_rate = j.at("content_frame_rate").get<double>();
  cfg.sv_seeds = j.at("sv_seeds").get<std::vector<std::uint64_t>>();
  cfg.sv_dims = j.at("sv_dims").get<std::vector<int>>();
  const auto& m = j.at("mel");
  cfg.mel.n_fft = m.at("n_fft").get<int>();
  cfg.mel.win_length = m.at("win_length").get<int>();
  cfg.mel.hop_length = m.at("hop_length").get<int>();
  cfg.mel.n_mels = m.at("n_mels").get<int>();
  cfg.mel.fmin = m.at("fmin").get<double>();
  cfg.mel.fmax = m.at("fmax").get<double>();
  cfg.mel.log_floor = m.at("log_floor").get<double>();
  return cfg;
}

int ProviderRegistry::timbre_dim() const {
  int d = 0;
  for (const auto& s : speakers) d += s->dim();
  return d;
}

void ProviderRegistry::validate() const {
  if (!content) throw std::runtime_error("no content provider registered");
  if (speakers.empty()) throw std::runtime_error("no speaker providers registered");
}

ProviderRegistry build_registry(const RegistryConfig& cfg) {
  if (cfg.sv_seeds.size() != cfg.sv_dims.size() || cfg.sv_seeds.empty()) {
    throw std::runtime_error("registry needs matching, non-empty sv_seeds/sv_dims");
  }
  ProviderRegistry reg;
  reg.content = std::make_unique<SyntheticContentProvider>(cfg.content_seed, cfg.content_dim,
                                                           cfg.content_frame_rate);
  static const char* kReplaces[] = {"cam++", "eres2net", "redimnet"};
  for (std::size_t i = 0; i < cfg.sv_seeds.size(); ++i) {
    std::string id = "synth-sv-" + std::to_string(i + 1);
    reg.speakers.push_back(std::make_unique<SyntheticSpeakerProvider>(
        id, cfg.sv_seeds[i], cfg.sv_dims[i], cfg.mel));
    reg.metadata["sv"][i] = {{"id", id},
                             {"dim", cfg.sv_dims[i]},
                             {"replaces", i < 3 ? kReplaces[i] : "custom"}};
  }
  // Config of the ASR stack the synthetic content provider stands in for.
  reg.metadata["content"] = {{"id", reg.content->id()},
                             {"dim", cfg.content_dim},
                             {"frame_rate", cfg.content_frame_rate},
                             {"replaces",
                              {{"family", "hybridformer"},
                               {"blocks", 12},
                               {"conv_kernel", 31},
                               {"attention_heads", 4},
                               {"attention_dim", 256},
                               {"ffn_dim", 1024}}}};
  return reg;
}

ContentFeatures extract_content(const Utterance& utt, const ProviderRegistry& registry) {
  registry.validate();
  return registry.content->extract(utt);
}

std::vector<TimbreEmbedding> extract_speaker_embeddings(const Utterance& utt,
                                                        const ProviderRegistry& registry) {
  registry.validate();
  std::vector<TimbreEmbedding> out;
  out.reserve(registry.speakers.size());
  for (const auto& sp : registry.speakers) out.push_back(sp->embed(utt));
  return out;
}

SegmentResult segment_reference(const Utterance& utt, double duration_s, Rng& rng) {
  utt.validate();
  if (duration_s <= 0.0) throw std::runtime_error("segment duration must be positive");
  const auto want = static_cast<std::size_t>(std::llround(duration_s * utt.sample_rate));
  SegmentResult res;
  if (utt.samples.size() < want) {
    res.segment = utt;
    res.short_reference = true;
    return res;
  }
  const auto max_offset = static_cast<std::int64_t>(utt.samples.size() - want);
  const auto offset = static_cast<std::size_t>(rng.uniform_int(0, max_offset));
  res.segment.sample_rate = utt.sample_rate;
  res.segment.id = utt.id + ":ref@" + std::to_string(offset);
  res.segment.samples.assign(utt.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                             utt.samples.begin() + static_cast<std::ptrdiff_t>(offset + want));
  return res;
}

Matrix align_frames(const Matrix& frames, Eigen::Index target) {
  if (frames.rows() < 1 || target < 1) {
    throw std::runtime_error("align_frames needs at least one row");
  }
  if (frames.rows() == target) return frames;
  Matrix out(target, frames.cols());
  if (frames.rows() == 1) {
    out.rowwise() = frames.row(0);
    return out;
  }
  const double step = (target == 1)
                          ? 0.0
                          : static_cast<double>(frames.rows() - 1) / static_cast<double>(target - 1);
  for (Eigen::Index t = 0; t < target; ++t) {
    const double pos = t * step;
    const auto lo = static_cast<Eigen::Index>(pos);
    const auto hi = std::min(lo + 1, frames.rows() - 1);
    const double frac = pos - static_cast<double>(lo);
    out.row(t) = (1.0 - frac) * frames.row(lo) + frac * frames.row(hi);
  }
  return out;
}

}  // namespace ctefm
