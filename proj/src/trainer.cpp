#include "ctefm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ctefm {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (learning_rate < 0.0 || batch_size < 1 || max_iters < 0 || weight_decay < 0.0 ||
      reference_duration_s <= 0.0 || euler_steps_eval < 1 || lambda_tim < 0.0 ||
      timbre_warmup_iters < 0 || grad_clip <= 0.0 || checkpoint_every < 1) {
    throw std::runtime_error("invalid train config");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"learning_rate", learning_rate},
                        {"batch_size", batch_size},
                        {"max_iters", max_iters},
                        {"weight_decay", weight_decay},
                        {"seed", seed},
                        {"reference_duration_s", reference_duration_s},
                        {"euler_steps_eval", euler_steps_eval},
                        {"lambda_tim", lambda_tim},
                        {"timbre_warmup_iters", timbre_warmup_iters},
                        {"grad_clip", grad_clip},
                        {"checkpoint_every", checkpoint_every},
                        {"threads", threads},
                        {"adam_beta1", adam_beta1},
                        {"adam_beta2", adam_beta2},
                        {"adam_eps", adam_eps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_iters = j.at("max_iters").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.reference_duration_s = j.at("reference_duration_s").get<double>();
  c.euler_steps_eval = j.at("euler_steps_eval").get<int>();
  c.lambda_tim = j.at("lambda_tim").get<double>();
  c.timbre_warmup_iters = j.at("timbre_warmup_iters").get<int>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.threads = j.at("threads").get<int>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.validate();
  return c;
}

Eigen::Index TrainBatch::total_valid_elements(int n_mels) const {
  Eigen::Index total = 0;
  for (const auto& item : items) total += item.valid_frames * n_mels;
  return total;
}

TrainBatch build_batch(const std::vector<ManifestItem>& items, const ProviderRegistry& registry,
                       Rng& rng, const TrainConfig& cfg, const MelConfig& mel_cfg) {
  registry.validate();
  struct Loaded {
    std::string id;
    Matrix x1;
    Matrix f_c;
    std::vector<Vector> ref_embs;
    bool short_ref = false;
  };
  std::vector<Loaded> loaded;
  for (const auto& mi : items) {
    try {
      Utterance utt = read_wav(mi.path);
      utt.id = mi.path;
      const MelSpectrogram mel = compute_mel(utt, mel_cfg);
      const ContentFeatures fc = registry.content->extract(utt);
      Loaded l;
      l.id = mi.path;
      l.x1 = mel.frames;
      l.f_c = align_frames(fc.frames, mel.frames.rows());
      const SegmentResult ref = segment_reference(utt, cfg.reference_duration_s, rng);
      l.short_ref = ref.short_reference;
      for (const auto& sp : registry.speakers) {
        l.ref_embs.push_back(sp->embed(ref.segment).vector);
      }
      loaded.push_back(std::move(l));
    } catch (const std::exception& e) {
      std::cerr << "[build_batch] skipping " << mi.path << ": " << e.what() << "\n";
    }
  }
  if (loaded.empty()) throw std::runtime_error("empty batch: no readable items");

  TrainBatch batch;
  for (const auto& l : loaded) batch.max_frames = std::max(batch.max_frames, l.x1.rows());
  batch.mask.setZero(static_cast<Eigen::Index>(loaded.size()), batch.max_frames);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    auto& l = loaded[i];
    BatchItem item;
    item.id = l.id;
    item.valid_frames = l.x1.rows();
    item.short_reference = l.short_ref;
    item.x1.setZero(batch.max_frames, l.x1.cols());
    item.x1.topRows(l.x1.rows()) = l.x1;
    item.f_c.setZero(batch.max_frames, l.f_c.cols());
    item.f_c.topRows(l.f_c.rows()) = l.f_c;
    item.ref_embs = std::move(l.ref_embs);
    batch.mask.row(static_cast<Eigen::Index>(i)).head(item.valid_frames).setOnes();
    batch.items.push_back(std::move(item));
  }
  return batch;
}

nn::Var item_loss_graph(nn::Tape& tape, CtefmModel& model, const ProviderRegistry& registry,
                        const BatchItem& item, double t, const Matrix& x0,
                        double inv_total_elements, double lambda_over_batch,
                        ItemLossParts* parts) {
  using namespace nn;
  // validity comes from the mask-derived frame count; padded rows never
  // enter the graph
  const Eigen::Index frames = item.valid_frames;
  const Matrix x1 = item.x1.topRows(frames);
  const Matrix f_c = item.f_c.topRows(frames);

  std::vector<Var> emb_vars;
  for (const auto& e : item.ref_embs) emb_vars.push_back(tape.constant(e.transpose()));
  Var f_t = ada_fusion_graph(tape, emb_vars, tape.param(*model.cte.ada.weights));
  Var h = cte_forward_graph(tape, model.cte, tape.constant(f_c), f_t);

  const Matrix x_t = ot_flow(t, x1, x0, model.cfg.flow);
  const Matrix target = target_vector(x0, x1, model.cfg.flow);
  Var pred = vector_field_graph(tape, model.vf, tape.constant(x_t), t, h, f_t);
  if (!pred.val().allFinite()) {
    throw std::runtime_error("diverged: non-finite vector field output for " + item.id);
  }
  Var diff = sub(pred, tape.constant(target));
  Var sse = sum_all(mul(diff, diff));

  if (parts != nullptr) {
    parts->sse = sse.scalar();
    parts->n_elements = frames * x1.cols();
  }

  Var root = scale(sse, inv_total_elements);

  // one-step mel estimate keeps the timbre objective differentiable without
  // running the sampler: x1_hat = x_t + (1 - t) * v_t(x_t)
  if (lambda_over_batch != 0.0) {
    Var x1_hat = add(tape.constant(x_t), scale(pred, 1.0 - t));
    Var tim_sum;
    for (std::size_t i = 0; i < registry.speakers.size(); ++i) {
      Var conv_emb = registry.speakers[i]->embed_mel(tape, x1_hat);
      Var ref_emb = tape.constant(item.ref_embs[i].transpose());
      Var s = ssim_graph(ref_emb, conv_emb);
      tim_sum = (i == 0) ? s : add(tim_sum, s);
    }
    Var l_tim = scale(tim_sum, -1.0);
    if (parts != nullptr) parts->l_tim = l_tim.scalar();
    root = add(root, scale(l_tim, lambda_over_batch));
  } else if (parts != nullptr) {
    // metric only, no gradient path needed
    const Matrix x1_hat = x_t + (1.0 - t) * pred.val();
    std::vector<Vector> conv, ref;
    for (std::size_t i = 0; i < registry.speakers.size(); ++i) {
      conv.push_back(registry.speakers[i]->embed_mel_plain(x1_hat));
      ref.push_back(item.ref_embs[i]);
    }
    parts->l_tim = timbre_loss(ref, conv);
  }
  return root;
}

Trainer::Trainer(CtefmModel& model, const ProviderRegistry& registry, const TrainConfig& cfg,
                 const MelConfig& mel_cfg)
    : model_(model), registry_(registry), cfg_(cfg), mel_cfg_(mel_cfg) {
  cfg_.validate();
  registry_.validate();
}

StepMetrics Trainer::train_step(const TrainBatch& batch, int iter) {
  const auto t_start = std::chrono::steady_clock::now();
  const auto n_items = static_cast<int>(batch.items.size());
  if (n_items == 0) throw std::runtime_error("empty batch");

  const int n_mels = model_.cfg.vf.n_mels;
  const double total_elements = static_cast<double>(batch.total_valid_elements(n_mels));
  const double lambda_eff = (iter < cfg_.timbre_warmup_iters) ? 0.0 : cfg_.lambda_tim;
  const double lambda_over_batch = lambda_eff / n_items;

  int n_threads = cfg_.threads > 0 ? cfg_.threads
                                   : static_cast<int>(std::thread::hardware_concurrency());
  n_threads = std::max(1, std::min(n_threads, n_items));

  const std::size_t n_params = model_.params.size();
  std::vector<std::vector<Matrix>> partials(static_cast<std::size_t>(n_threads));
  std::vector<ItemLossParts> parts(static_cast<std::size_t>(n_items));
  std::vector<std::string> failures(static_cast<std::size_t>(n_items));

#ifdef _OPENMP
#pragma omp parallel num_threads(n_threads)
#endif
  {
#ifdef _OPENMP
    const int tid = omp_get_thread_num();
#else
    const int tid = 0;
#endif
    auto& acc = partials[static_cast<std::size_t>(tid)];
    acc.resize(n_params);
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
    for (int i = 0; i < n_items; ++i) {
      try {
        Rng item_rng(Rng::derive(cfg_.seed, Rng::hash_str("train-step"),
                                 static_cast<std::uint64_t>(iter),
                                 static_cast<std::uint64_t>(i)));
        const double t = item_rng.uniform();
        const Matrix x0 =
            gaussian_matrix(item_rng, batch.items[static_cast<std::size_t>(i)].valid_frames,
                            n_mels);
        nn::Tape tape;
        nn::Var root = item_loss_graph(tape, model_, registry_,
                                       batch.items[static_cast<std::size_t>(i)], t, x0,
                                       1.0 / total_elements, lambda_over_batch,
                                       &parts[static_cast<std::size_t>(i)]);
        if (!std::isfinite(root.scalar())) {
          throw std::runtime_error("non-finite loss");
        }
        tape.backward(root);
        tape.collect_param_grads(acc);
      } catch (const std::exception& e) {
        failures[static_cast<std::size_t>(i)] = e.what();
      }
    }
  }

  std::string failed_ids;
  for (int i = 0; i < n_items; ++i) {
    if (!failures[static_cast<std::size_t>(i)].empty()) {
      failed_ids += "\n  " + batch.items[static_cast<std::size_t>(i)].id + ": " +
                    failures[static_cast<std::size_t>(i)];
    }
  }
  if (!failed_ids.empty()) {
    throw std::runtime_error("train_step aborted at iter " + std::to_string(iter) +
                             "; failing batch items:" + failed_ids);
  }

  // deterministic reduction: fixed thread partition, fixed merge order
  model_.params.zero_grads();
  for (auto& acc : partials) {
    for (std::size_t pi = 0; pi < n_params; ++pi) {
      if (acc[pi].size() != 0) model_.params.at(pi).grad += acc[pi];
    }
  }

  StepMetrics m;
  double sse_total = 0.0;
  for (const auto& p : parts) {
    sse_total += p.sse;
    m.l_tim += p.l_tim;
  }
  m.l_tim /= n_items;
  m.l_cfm = sse_total / total_elements;
  m.l_total = m.l_cfm + lambda_eff * m.l_tim;

  double sq_norm = 0.0;
  for (std::size_t pi = 0; pi < n_params; ++pi) sq_norm += model_.params.at(pi).grad.squaredNorm();
  m.grad_norm = std::sqrt(sq_norm);
  const double clip_scale = (m.grad_norm > cfg_.grad_clip) ? cfg_.grad_clip / m.grad_norm : 1.0;

  // AdamW: decoupled weight decay, bias-corrected moments
  const double step_count = static_cast<double>(iter) + 1.0;
  const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, step_count);
  const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, step_count);
  for (std::size_t pi = 0; pi < n_params; ++pi) {
    Parameter& p = model_.params.at(pi);
    const Matrix g = clip_scale * p.grad;
    p.value -= cfg_.learning_rate * cfg_.weight_decay * p.value;
    p.m = cfg_.adam_beta1 * p.m + (1.0 - cfg_.adam_beta1) * g;
    p.v = (cfg_.adam_beta2 * p.v.array() + (1.0 - cfg_.adam_beta2) * g.array().square()).matrix();
    const Matrix m_hat = p.m / bc1;
    const Matrix v_hat = p.v / bc2;
    p.value.array() -= cfg_.learning_rate * m_hat.array() / (v_hat.array().sqrt() + cfg_.adam_eps);
  }

  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                        t_start)
                  .count();
  return m;
}

ValMetrics Trainer::validate(const std::vector<ManifestItem>& val_items, int euler_steps) const {
  if (val_items.empty()) throw std::runtime_error("empty validation set");
  ValMetrics vm;
  std::vector<double> ada_w(model_.cte.ada.weights->value.data(),
                            model_.cte.ada.weights->value.data() +
                                model_.cte.ada.weights->value.size());
  for (std::size_t i = 0; i < val_items.size(); ++i) {
    Utterance utt = read_wav(val_items[i].path);
    const MelSpectrogram mel = compute_mel(utt, mel_cfg_);
    const ContentFeatures fc_raw = registry_.content->extract(utt);
    ContentFeatures fc{align_frames(fc_raw.frames, mel.frames.rows()), fc_raw.frame_rate};

    Rng seg_rng(Rng::derive(cfg_.seed, Rng::hash_str("val-seg"), i));
    const SegmentResult ref = segment_reference(utt, cfg_.reference_duration_s, seg_rng);
    const auto embs = extract_speaker_embeddings(ref.segment, registry_);
    const GlobalTimbre f_t = ada_fusion(embs, ada_w);
    const ConditioningFeatures h = cte_forward(model_.cte, fc, f_t);

    Rng loss_rng(Rng::derive(cfg_.seed, Rng::hash_str("val-loss"), i));
    vm.l_cfm += cfm_loss(model_.vf, mel.frames, h.frames, f_t.vector, loss_rng, model_.cfg.flow);

    Rng sample_rng(Rng::derive(cfg_.seed, Rng::hash_str("val-sample"), i));
    const MelSpectrogram gen =
        euler_sample(model_.vf, h.frames, f_t.vector, euler_steps, sample_rng, mel_cfg_);
    vm.mel_mse += (gen.frames - mel.frames).squaredNorm() / static_cast<double>(mel.frames.size());
    double s = 0.0;
    for (std::size_t k = 0; k < registry_.speakers.size(); ++k) {
      s += secs(registry_.speakers[k]->embed_mel_plain(gen.frames), embs[k].vector);
    }
    vm.secs_mean += s / static_cast<double>(registry_.speakers.size());
  }
  vm.n_items = static_cast<int>(val_items.size());
  vm.l_cfm /= vm.n_items;
  vm.mel_mse /= vm.n_items;
  vm.secs_mean /= vm.n_items;
  return vm;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kCkptMagic[8] = {'C', 'T', 'E', 'F', 'M', 'C', 'K', '1'};

struct TensorRef {
  std::string name;
  const Matrix* data;
};

std::vector<TensorRef> checkpoint_tensors(const CtefmModel& model) {
  std::vector<TensorRef> refs;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Parameter& p = model.params.at(i);
    refs.push_back({"param." + p.name, &p.value});
    refs.push_back({"adam_m." + p.name, &p.m});
    refs.push_back({"adam_v." + p.name, &p.v});
  }
  return refs;
}

}  // namespace

void save_checkpoint(const std::string& path, const CtefmModel& model,
                     const CheckpointState& state) {
  const auto refs = checkpoint_tensors(model);
  nlohmann::json header;
  header["format_version"] = state.format_version;
  header["iteration"] = state.iteration;
  header["model_config"] = state.model_cfg.to_json();
  header["train_config"] = state.train_cfg.to_json();
  header["registry"] = state.registry_cfg.to_json();
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& ref : refs) {
    tensors.push_back({{"name", ref.name},
                       {"rows", ref.data->rows()},
                       {"cols", ref.data->cols()},
                       {"dtype", "f8"},
                       {"offset", offset}});
    offset += static_cast<std::uint64_t>(ref.data->size()) * sizeof(double);
  }
  header["tensors"] = tensors;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write(kCkptMagic, sizeof(kCkptMagic));
  const std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  std::vector<double> row;
  for (const auto& ref : refs) {
    const Matrix& m = *ref.data;
    row.resize(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
      out.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(double)));
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

CheckpointState load_checkpoint(const std::string& path, std::unique_ptr<CtefmModel>& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("corrupt-checkpoint: bad magic in " + path);
  }
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (in.gcount() != sizeof(header_len)) {
    throw std::runtime_error("corrupt-checkpoint: truncated header length in " + path);
  }
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::uint64_t>(in.gcount()) != header_len) {
    throw std::runtime_error("corrupt-checkpoint: truncated header in " + path);
  }
  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded()) {
    throw std::runtime_error("corrupt-checkpoint: unparsable header in " + path);
  }
  const int version = header.at("format_version").get<int>();
  if (version != 1) {
    throw std::runtime_error("checkpoint format version " + std::to_string(version) +
                             " unsupported, expected version 1");
  }

  CheckpointState state;
  state.format_version = version;
  state.iteration = header.at("iteration").get<std::int64_t>();
  state.model_cfg = ModelConfig::from_json(header.at("model_config"));
  state.train_cfg = TrainConfig::from_json(header.at("train_config"));
  state.registry_cfg = RegistryConfig::from_json(header.at("registry"));

  model = std::make_unique<CtefmModel>(state.model_cfg);
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto dot = name.find('.');
    const std::string kind = name.substr(0, dot);
    Parameter* p = model->params.find(name.substr(dot + 1));
    if (p == nullptr) {
      throw std::runtime_error("corrupt-checkpoint: unknown tensor " + name);
    }
    Matrix* dst = kind == "param" ? &p->value : kind == "adam_m" ? &p->m : &p->v;
    if (dst->rows() != rows || dst->cols() != cols) {
      throw std::runtime_error("corrupt-checkpoint: shape mismatch for " + name);
    }
    std::vector<double> row(static_cast<std::size_t>(cols));
    for (Eigen::Index r = 0; r < rows; ++r) {
      in.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(double)));
      if (static_cast<std::size_t>(in.gcount()) != row.size() * sizeof(double)) {
        throw std::runtime_error("corrupt-checkpoint: truncated payload in " + path);
      }
      for (Eigen::Index c = 0; c < cols; ++c) (*dst)(r, c) = row[static_cast<std::size_t>(c)];
    }
  }
  return state;
}

MetricsLog::MetricsLog(const std::string& path) : path_(path) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot open metrics log: " + path_);
}

void MetricsLog::append(int iter, const StepMetrics& m) {
  std::ofstream out(path_, std::ios::app);
  nlohmann::json j{{"iter", iter},       {"l_cfm", m.l_cfm},         {"l_tim", m.l_tim},
                   {"l_total", m.l_total}, {"grad_norm", m.grad_norm}, {"wall_ms", m.wall_ms}};
  out << j.dump() << "\n";
}

TrainRunResult run_training(const std::string& manifest_path, const std::string& out_dir,
                            CtefmModel& model, const ProviderRegistry& registry,
                            const TrainConfig& cfg, const RegistryConfig& reg_cfg,
                            const MelConfig& mel_cfg, std::int64_t start_iter) {
  cfg.validate();
  const auto all_items = read_manifest(manifest_path);
  std::vector<ManifestItem> train_items;
  for (const auto& it : all_items) {
    if (it.split == "train") train_items.push_back(it);
  }
  if (train_items.empty()) train_items = all_items;  // tiny corpora: train on everything

  fs::create_directories(out_dir);
  Trainer trainer(model, registry, cfg, mel_cfg);
  MetricsLog log((fs::path(out_dir) / "metrics.jsonl").string());

  CheckpointState state;
  state.model_cfg = model.cfg;
  state.train_cfg = cfg;
  state.registry_cfg = reg_cfg;

  TrainRunResult result;
  const std::string final_path = (fs::path(out_dir) / "checkpoint_final.ckpt").string();
  for (int iter = static_cast<int>(start_iter); iter < cfg.max_iters; ++iter) {
    // deterministic with-replacement sampling keyed by (seed, iter)
    Rng pick_rng(Rng::derive(cfg.seed, Rng::hash_str("batch-pick"), static_cast<std::uint64_t>(iter)));
    std::vector<ManifestItem> chosen;
    for (int b = 0; b < cfg.batch_size; ++b) {
      chosen.push_back(train_items[static_cast<std::size_t>(
          pick_rng.uniform_int(0, static_cast<std::int64_t>(train_items.size()) - 1))]);
    }
    Rng batch_rng(Rng::derive(cfg.seed, Rng::hash_str("batch-build"), static_cast<std::uint64_t>(iter)));
    const TrainBatch batch = build_batch(chosen, registry, batch_rng, cfg, mel_cfg);
    const StepMetrics m = trainer.train_step(batch, iter);
    log.append(iter, m);
    if (iter == static_cast<int>(start_iter)) result.first = m;
    result.last = m;
    const int done = iter + 1;
    if (done % cfg.checkpoint_every == 0 && done < cfg.max_iters) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.ckpt", done);
      state.iteration = done;
      save_checkpoint((fs::path(out_dir) / name).string(), model, state);
    }
  }
  state.iteration = cfg.max_iters;
  save_checkpoint(final_path, model, state);
  result.final_checkpoint = final_path;
  return result;
}

}  // namespace ctefm
