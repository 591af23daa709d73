#include "ctefm/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <stdexcept>

#include "ctefm/tensor_io.hpp"

namespace ctefm {

namespace fs = std::filesystem;

void VocoderAdapter::write(const MelSpectrogram& mel, const std::string& output_path) const {
  if (id == "identity-mel") {
    save_tensor(output_path, mel.frames);
    return;
  }
  if (id == "external") {
    if (command.empty()) throw std::runtime_error("external vocoder needs a command");
    const std::string mel_path = output_path + ".mel";
    save_tensor(mel_path, mel.frames);
    const std::string cmd = command + " \"" + mel_path + "\" \"" + output_path + "\"";
    const int rc = std::system(cmd.c_str());
    std::error_code ec;
    fs::remove(mel_path, ec);
    if (rc != 0) {
      throw std::runtime_error("vocoder command failed (exit " + std::to_string(rc) +
                               "): " + command);
    }
    return;
  }
  throw std::runtime_error("unknown vocoder adapter: " + id);
}

void ConversionRequest::validate() const {
  if (source_path.empty() || reference_path.empty() || output_path.empty() ||
      checkpoint_path.empty()) {
    throw std::runtime_error("conversion request: all paths are required");
  }
  // source and reference may coincide (self-conversion); the output must not
  // clobber any input
  if (output_path == source_path || output_path == reference_path ||
      output_path == checkpoint_path) {
    throw std::runtime_error("conversion request: output path collides with an input");
  }
  if (euler_steps < 1) throw std::runtime_error("conversion request: euler_steps >= 1");
}

namespace {

struct LoadedModel {
  std::unique_ptr<CtefmModel> model;
  CheckpointState state;
  ProviderRegistry registry;
};

LoadedModel load_for_inference(const std::string& checkpoint_path) {
  LoadedModel lm;
  lm.state = load_checkpoint(checkpoint_path, lm.model);
  lm.registry = build_registry(lm.state.registry_cfg);
  return lm;
}

std::vector<double> ada_weights_of(const CtefmModel& model) {
  const Matrix& w = model.cte.ada.weights->value;
  return std::vector<double>(w.data(), w.data() + w.size());
}

}  // namespace

ConversionResult convert(const ConversionRequest& req, const VocoderAdapter& vocoder) {
  req.validate();
  LoadedModel lm = load_for_inference(req.checkpoint_path);
  const MelConfig& mel_cfg = lm.state.registry_cfg.mel;

  Utterance source = read_wav(req.source_path);
  const MelSpectrogram source_mel = compute_mel(source, mel_cfg);
  const ContentFeatures fc_raw = extract_content(source, lm.registry);
  const ContentFeatures fc{align_frames(fc_raw.frames, source_mel.frames.rows()),
                           fc_raw.frame_rate};

  // full reference utterance at inference time
  Utterance reference = read_wav(req.reference_path);
  const auto embs = extract_speaker_embeddings(reference, lm.registry);
  const GlobalTimbre f_t = ada_fusion(embs, ada_weights_of(*lm.model));
  const ConditioningFeatures h = cte_forward(lm.model->cte, fc, f_t);

  Rng rng(Rng::derive(req.seed, Rng::hash_str("convert")));
  ConversionResult result;
  result.mel = euler_sample(lm.model->vf, h.frames, f_t.vector, req.euler_steps, rng, mel_cfg);
  for (const auto& sp : lm.registry.speakers) {
    result.output_embs.push_back(sp->embed_mel_plain(result.mel.frames));
  }
  vocoder.write(result.mel, req.output_path);
  return result;
}

nlohmann::json run_eval(const std::string& manifest_path, const std::string& checkpoint_path,
                        const EvalOptions& opts) {
  LoadedModel lm = load_for_inference(checkpoint_path);
  const MelConfig& mel_cfg = lm.state.registry_cfg.mel;
  const auto all_items = read_manifest(manifest_path);

  std::vector<ManifestItem> held_out;
  for (const auto& it : all_items) {
    if (it.split == "val") held_out.push_back(it);
  }
  if (held_out.empty()) throw std::runtime_error("no held-out (val) items in manifest");
  std::vector<std::string> speakers;
  for (const auto& it : held_out) {
    if (std::find(speakers.begin(), speakers.end(), it.speaker_id) == speakers.end()) {
      speakers.push_back(it.speaker_id);
    }
  }
  if (speakers.size() < 2) throw std::runtime_error("eval needs at least 2 held-out speakers");

  const int n_pairs = opts.n_pairs > 0 ? opts.n_pairs : static_cast<int>(held_out.size());
  const auto n_providers = lm.registry.speakers.size();
  const std::vector<double> ada_w = ada_weights_of(*lm.model);

  nlohmann::json pairs = nlohmann::json::array();
  std::vector<double> secs_provider_sum(n_providers, 0.0);
  double secs_sum = 0.0;
  double teacher_mse_sum = 0.0;

  for (int k = 0; k < n_pairs; ++k) {
    const auto& src = held_out[static_cast<std::size_t>(k) % held_out.size()];
    Rng pick(Rng::derive(opts.seed, Rng::hash_str("eval-pair"), static_cast<std::uint64_t>(k)));
    const ManifestItem* ref = nullptr;
    do {
      const auto& cand =
          held_out[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(held_out.size()) - 1))];
      if (cand.speaker_id != src.speaker_id) ref = &cand;
    } while (ref == nullptr);

    Utterance source = read_wav(src.path);
    const MelSpectrogram source_mel = compute_mel(source, mel_cfg);
    const ContentFeatures fc_raw = extract_content(source, lm.registry);
    const ContentFeatures fc{align_frames(fc_raw.frames, source_mel.frames.rows()),
                             fc_raw.frame_rate};

    Utterance reference = read_wav(ref->path);
    const auto ref_embs = extract_speaker_embeddings(reference, lm.registry);
    const GlobalTimbre f_t = ada_fusion(ref_embs, ada_w);
    const ConditioningFeatures h = cte_forward(lm.model->cte, fc, f_t);

    Rng rng(Rng::derive(opts.seed, Rng::hash_str("eval-sample"), static_cast<std::uint64_t>(k)));
    const MelSpectrogram gen =
        euler_sample(lm.model->vf, h.frames, f_t.vector, opts.euler_steps, rng, mel_cfg);

    // teacher-conditioned reconstruction of the source under its own timbre
    const auto src_embs = extract_speaker_embeddings(source, lm.registry);
    const GlobalTimbre src_ft = ada_fusion(src_embs, ada_w);
    const ConditioningFeatures src_h = cte_forward(lm.model->cte, fc, src_ft);
    Rng teacher_rng(Rng::derive(opts.seed, Rng::hash_str("eval-teacher"), static_cast<std::uint64_t>(k)));
    const MelSpectrogram recon = euler_sample(lm.model->vf, src_h.frames, src_ft.vector,
                                              opts.euler_steps, teacher_rng, mel_cfg);
    const double teacher_mse = (recon.frames - source_mel.frames).squaredNorm() /
                               static_cast<double>(source_mel.frames.size());
    teacher_mse_sum += teacher_mse;

    nlohmann::json pair;
    pair["source"] = src.path;
    pair["reference"] = ref->path;
    double mean_s = 0.0;
    nlohmann::json per_provider = nlohmann::json::array();
    for (std::size_t pidx = 0; pidx < n_providers; ++pidx) {
      const Vector out_emb = lm.registry.speakers[pidx]->embed_mel_plain(gen.frames);
      const double s = secs(out_emb, ref_embs[pidx].vector);
      per_provider.push_back(s);
      secs_provider_sum[pidx] += s;
      mean_s += s;
    }
    mean_s /= static_cast<double>(n_providers);
    secs_sum += mean_s;
    pair["secs_per_provider"] = per_provider;
    pair["secs_mean"] = mean_s;
    pairs.push_back(std::move(pair));
  }

  nlohmann::json report;
  report["pairs"] = pairs;
  report["n_pairs"] = n_pairs;
  report["secs_mean"] = secs_sum / n_pairs;
  nlohmann::json per_provider_mean = nlohmann::json::array();
  for (std::size_t pidx = 0; pidx < n_providers; ++pidx) {
    per_provider_mean.push_back(secs_provider_sum[pidx] / n_pairs);
  }
  report["secs_per_provider"] = per_provider_mean;
  report["mel_mse_teacher"] = teacher_mse_sum / n_pairs;
  return report;
}

}  // namespace ctefm
