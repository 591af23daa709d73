#include <doctest.h>

#include <fstream>

#include "ctefm/config.hpp"
#include "ctefm/trainer.hpp"
#include "helpers.hpp"

using namespace ctefm;

namespace {

RunSetup tiny_setup() {
  RunSetup s;
  s.mel.n_fft = 256;
  s.mel.win_length = 256;
  s.mel.hop_length = 128;
  s.mel.n_mels = 20;
  s.model.cte.content_dim = 24;
  s.model.cte.model_dim = 16;
  s.model.cte.n_heads = 2;
  s.model.cte.ffn_dim = 24;
  s.model.cte.n_blocks = 2;
  s.registry.sv_dims = {12, 10};
  s.registry.content_dim = 24;
  s.model.vf.base_channels = 8;
  s.model.vf.mid_channels = 12;
  s.model.vf.kernel = 3;
  s.model.vf.temb_dim = 8;
  s.train.batch_size = 2;
  s.train.max_iters = 4;
  s.train.checkpoint_every = 2;
  s.train.learning_rate = 3e-4;
  s.train.seed = 404;
  s.finalize();
  return s;
}

// Writes a few short corpus WAVs plus a manifest and returns its path.
std::string write_tiny_corpus(const test::TempDir& dir, int n_speakers, int n_utts,
                              std::uint64_t seed, double min_s = 0.35, double max_s = 0.55) {
  CorpusSpec spec;
  spec.n_speakers = n_speakers;
  spec.n_utts = n_utts;
  spec.seed = seed;
  spec.min_duration_s = min_s;
  spec.max_duration_s = max_s;
  spec.force = true;
  return synth_corpus(dir.path(), spec);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("build_batch pads to the longest item and masks validity") {
  test::TempDir dir("batch");
  RunSetup s = tiny_setup();
  const std::string manifest = write_tiny_corpus(dir, 2, 1, 5, 0.35, 0.7);
  const ProviderRegistry reg = build_registry(s.registry);
  auto items = read_manifest(manifest);
  REQUIRE(items.size() == 2);

  Rng rng(1);
  const TrainBatch batch = build_batch(items, reg, rng, s.train, s.mel);
  REQUIRE(batch.items.size() == 2);
  CHECK(batch.max_frames == std::max(batch.items[0].valid_frames, batch.items[1].valid_frames));
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& item = batch.items[i];
    CHECK(item.x1.rows() == batch.max_frames);
    CHECK(item.f_c.rows() == batch.max_frames);
    CHECK(batch.mask.row(static_cast<Eigen::Index>(i)).sum() ==
          doctest::Approx(double(item.valid_frames)));
    if (item.valid_frames < batch.max_frames) {
      CHECK(item.x1.bottomRows(batch.max_frames - item.valid_frames).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK(item.ref_embs.size() == reg.speakers.size());
    // utterances are shorter than the 4 s reference policy
    CHECK(item.short_reference);
  }
}

TEST_CASE("build_batch is deterministic and skips unreadable files") {
  test::TempDir dir("batch_det");
  RunSetup s = tiny_setup();
  const std::string manifest = write_tiny_corpus(dir, 2, 1, 6);
  const ProviderRegistry reg = build_registry(s.registry);
  auto items = read_manifest(manifest);

  Rng r1(9), r2(9);
  const TrainBatch a = build_batch(items, reg, r1, s.train, s.mel);
  const TrainBatch b = build_batch(items, reg, r2, s.train, s.mel);
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK((a.items[i].x1 - b.items[i].x1).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.items[i].f_c - b.items[i].f_c).cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t p = 0; p < a.items[i].ref_embs.size(); ++p) {
      CHECK((a.items[i].ref_embs[p] - b.items[i].ref_embs[p]).norm() == 0.0);
    }
  }

  auto with_bad = items;
  with_bad.push_back({dir.path("missing.wav"), "spkX", "train"});
  Rng r3(9);
  const TrainBatch c = build_batch(with_bad, reg, r3, s.train, s.mel);
  CHECK(c.items.size() == items.size());

  std::vector<ManifestItem> all_bad = {{dir.path("missing.wav"), "spkX", "train"}};
  Rng r4(9);
  CHECK_THROWS_WITH_AS(build_batch(all_bad, reg, r4, s.train, s.mel),
                       doctest::Contains("empty batch"), std::runtime_error);
}

TEST_CASE("reference embeddings come from the source utterance itself") {
  test::TempDir dir("batch_ref");
  RunSetup s = tiny_setup();
  const std::string manifest = write_tiny_corpus(dir, 1, 1, 7);
  const ProviderRegistry reg = build_registry(s.registry);
  auto items = read_manifest(manifest);
  Rng rng(3);
  const TrainBatch batch = build_batch(items, reg, rng, s.train, s.mel);
  // short utterance: the reference segment is the whole source utterance
  const Utterance utt = read_wav(items[0].path);
  const auto direct = extract_speaker_embeddings(utt, reg);
  for (std::size_t p = 0; p < direct.size(); ++p) {
    CHECK((batch.items[0].ref_embs[p] - direct[p].vector).norm() == 0.0);
  }
}

TEST_CASE("zero learning rate reports metrics but leaves parameters unchanged") {
  test::TempDir dir("zero_lr");
  RunSetup s = tiny_setup();
  s.train.learning_rate = 0.0;
  const std::string manifest = write_tiny_corpus(dir, 1, 2, 8);
  const ProviderRegistry reg = build_registry(s.registry);
  CtefmModel model(s.model);
  model.init(1);

  std::vector<Matrix> before;
  for (std::size_t i = 0; i < model.params.size(); ++i) before.push_back(model.params.at(i).value);

  Trainer trainer(model, reg, s.train, s.mel);
  Rng rng(2);
  const TrainBatch batch = build_batch(read_manifest(manifest), reg, rng, s.train, s.mel);
  const StepMetrics m = trainer.train_step(batch, 0);
  CHECK(std::isfinite(m.l_cfm));
  CHECK(std::isfinite(m.l_tim));
  CHECK(std::isfinite(m.grad_norm));
  CHECK(m.l_total == doctest::Approx(m.l_cfm + s.train.lambda_tim * m.l_tim));
  CHECK(m.grad_norm > 0.0);

  for (std::size_t i = 0; i < model.params.size(); ++i) {
    CHECK((model.params.at(i).value - before[i]).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("padding rows contribute exactly nothing to the loss") {
  test::TempDir dir("pad_inv");
  RunSetup s = tiny_setup();
  const std::string manifest = write_tiny_corpus(dir, 1, 1, 9);
  const ProviderRegistry reg = build_registry(s.registry);
  CtefmModel model(s.model);
  model.init(2);

  Rng rng(4);
  TrainBatch batch = build_batch(read_manifest(manifest), reg, rng, s.train, s.mel);
  BatchItem item = batch.items[0];

  BatchItem padded = item;
  const Eigen::Index extra = 13;
  padded.x1.conservativeResize(item.x1.rows() + extra, item.x1.cols());
  padded.x1.bottomRows(extra).setZero();
  padded.f_c.conservativeResize(item.f_c.rows() + extra, item.f_c.cols());
  padded.f_c.bottomRows(extra).setZero();

  Rng noise(5);
  const Matrix x0 = gaussian_matrix(noise, item.valid_frames, s.model.vf.n_mels);
  ItemLossParts parts_a, parts_b;
  nn::Tape ta, tb;
  const double la =
      item_loss_graph(ta, model, reg, item, 0.41, x0, 1e-3, 0.02, &parts_a).scalar();
  const double lb =
      item_loss_graph(tb, model, reg, padded, 0.41, x0, 1e-3, 0.02, &parts_b).scalar();
  CHECK(std::abs(la - lb) <= 1e-12);
  CHECK(parts_a.sse == parts_b.sse);
  CHECK(parts_a.l_tim == parts_b.l_tim);
}

TEST_CASE("end-to-end gradients match finite differences across modules") {
  test::TempDir dir("grad_e2e");
  RunSetup s = tiny_setup();
  const std::string manifest = write_tiny_corpus(dir, 1, 1, 10);
  const ProviderRegistry reg = build_registry(s.registry);
  CtefmModel model(s.model);
  model.init(3);

  Rng rng(6);
  const TrainBatch batch = build_batch(read_manifest(manifest), reg, rng, s.train, s.mel);
  const BatchItem& item = batch.items[0];
  Rng noise(7);
  const Matrix x0 = gaussian_matrix(noise, item.valid_frames, s.model.vf.n_mels);
  const double t = 0.37;
  const double inv_n = 1.0 / double(item.valid_frames * s.model.vf.n_mels);
  const double lam = 0.05;

  auto loss = [&]() {
    nn::Tape tape;
    return item_loss_graph(tape, model, reg, item, t, x0, inv_n, lam, nullptr).scalar();
  };
  nn::Tape tape;
  nn::Var root = item_loss_graph(tape, model, reg, item, t, x0, inv_n, lam, nullptr);
  tape.backward(root);
  std::vector<Matrix> acc(model.params.size());
  tape.collect_param_grads(acc);

  // 20 parameters spread over ada weights, cte blocks and the vector field
  Rng pick(8);
  int checked = 0;
  while (checked < 20) {
    const auto pi =
        static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(model.params.size()) - 1));
    Parameter& p = model.params.at(pi);
    if (acc[pi].size() == 0) continue;
    const double err = test::max_grad_rel_err(p.value, acc[pi], loss, 2, Rng::derive(9, pi), 1e-5);
    INFO("param ", p.name);
    CHECK(err < 1e-3);
    ++checked;
  }
}

TEST_CASE("overfitting a single item drives the CFM loss down 10x") {
  test::TempDir dir("overfit");
  RunSetup s = tiny_setup();
  s.train.learning_rate = 3e-3;
  s.train.batch_size = 1;
  s.model.vf.base_channels = 20;
  s.model.vf.mid_channels = 32;
  s.finalize();
  const std::string manifest = write_tiny_corpus(dir, 1, 1, 11);
  const ProviderRegistry reg = build_registry(s.registry);
  CtefmModel model(s.model);
  model.init(4);
  Trainer trainer(model, reg, s.train, s.mel);

  Rng rng(12);
  const TrainBatch batch = build_batch(read_manifest(manifest), reg, rng, s.train, s.mel);
  double first = 0.0, last = 0.0;
  const int steps = 1000;
  double tail = 0.0;
  for (int i = 0; i < steps; ++i) {
    const StepMetrics m = trainer.train_step(batch, i);
    if (i == 0) first = m.l_cfm;
    if (i >= steps - 10) tail += m.l_cfm;
    last = m.l_cfm;
  }
  tail /= 10.0;
  INFO("first ", first, " last ", last, " tail ", tail);
  CHECK(tail * 10.0 <= first);
}

TEST_CASE("checkpoint round trip is bit exact and versioned") {
  test::TempDir dir("ckpt");
  RunSetup s = tiny_setup();
  CtefmModel model(s.model);
  model.init(5);

  CheckpointState state;
  state.iteration = 42;
  state.model_cfg = s.model;
  state.train_cfg = s.train;
  state.registry_cfg = s.registry;

  const std::string p1 = dir.path("a.ckpt");
  save_checkpoint(p1, model, state);

  std::unique_ptr<CtefmModel> loaded;
  const CheckpointState st = load_checkpoint(p1, loaded);
  CHECK(st.iteration == 42);
  CHECK(st.train_cfg.seed == s.train.seed);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    CHECK((model.params.at(i).value - loaded->params.at(i).value).cwiseAbs().maxCoeff() == 0.0);
    CHECK((model.params.at(i).m - loaded->params.at(i).m).cwiseAbs().maxCoeff() == 0.0);
  }

  const std::string p2 = dir.path("b.ckpt");
  save_checkpoint(p2, *loaded, st);
  CHECK(read_file(p1) == read_file(p2));

  // truncation
  const std::string bytes = read_file(p1);
  const std::string p3 = dir.path("trunc.ckpt");
  {
    std::ofstream out(p3, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() * 2 / 3));
  }
  std::unique_ptr<CtefmModel> n1;
  CHECK_THROWS_WITH_AS(load_checkpoint(p3, n1), doctest::Contains("corrupt-checkpoint"),
                       std::runtime_error);

  // version mismatch names both versions
  std::string patched = bytes;
  const std::string needle = "\"format_version\":1";
  patched.replace(patched.find(needle), needle.size(), "\"format_version\":7");
  const std::string p4 = dir.path("ver.ckpt");
  {
    std::ofstream out(p4, std::ios::binary);
    out.write(patched.data(), static_cast<std::streamsize>(patched.size()));
  }
  std::unique_ptr<CtefmModel> n2;
  CHECK_THROWS_WITH_AS(load_checkpoint(p4, n2),
                       doctest::Contains("version 7 unsupported, expected version 1"),
                       std::runtime_error);
}

TEST_CASE("resume matches uninterrupted training to 1e-10") {
  test::TempDir corpus_dir("resume_corpus");
  RunSetup s = tiny_setup();
  s.train.max_iters = 8;
  s.train.checkpoint_every = 4;
  const std::string manifest = write_tiny_corpus(corpus_dir, 2, 2, 13);
  const ProviderRegistry reg = build_registry(s.registry);

  test::TempDir run_a("resume_a");
  CtefmModel straight(s.model);
  straight.init(6);
  run_training(manifest, run_a.path(), straight, reg, s.train, s.registry, s.mel);

  test::TempDir run_b("resume_b");
  CtefmModel half(s.model);
  half.init(6);
  {
    TrainConfig first_half = s.train;
    first_half.max_iters = 4;
    run_training(manifest, run_b.path(), half, reg, first_half, s.registry, s.mel);
  }
  std::unique_ptr<CtefmModel> resumed;
  const CheckpointState st = load_checkpoint((std::filesystem::path(run_b.path()) /
                                              "checkpoint_final.ckpt")
                                                 .string(),
                                             resumed);
  CHECK(st.iteration == 4);
  test::TempDir run_c("resume_c");
  run_training(manifest, run_c.path(), *resumed, reg, s.train, s.registry, s.mel, st.iteration);

  for (std::size_t i = 0; i < straight.params.size(); ++i) {
    const double diff =
        (straight.params.at(i).value - resumed->params.at(i).value).cwiseAbs().maxCoeff();
    CHECK(diff <= 1e-10);
  }
}

TEST_CASE("identical seeds produce identical metric streams") {
  test::TempDir corpus_dir("det_corpus");
  RunSetup s = tiny_setup();
  s.train.max_iters = 3;
  const std::string manifest = write_tiny_corpus(corpus_dir, 2, 1, 14);
  const ProviderRegistry reg = build_registry(s.registry);

  auto run_once = [&](const std::string& out_dir) {
    CtefmModel model(s.model);
    model.init(7);
    run_training(manifest, out_dir, model, reg, s.train, s.registry, s.mel);
    std::ifstream in(out_dir + "/metrics.jsonl");
    std::vector<nlohmann::json> rows;
    std::string line;
    while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
    return rows;
  };
  test::TempDir a("det_a"), b("det_b");
  const auto ra = run_once(a.path());
  const auto rb = run_once(b.path());
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    for (const char* key : {"iter", "l_cfm", "l_tim", "l_total", "grad_norm"}) {
      CHECK(ra[i].at(key) == rb[i].at(key));
    }
  }
}

TEST_CASE("validate is read-only and reports finite metrics") {
  test::TempDir dir("validate");
  RunSetup s = tiny_setup();
  const std::string manifest = write_tiny_corpus(dir, 2, 2, 15);
  const ProviderRegistry reg = build_registry(s.registry);
  CtefmModel model(s.model);
  model.init(8);
  Trainer trainer(model, reg, s.train, s.mel);

  std::vector<ManifestItem> val_items;
  for (const auto& it : read_manifest(manifest)) {
    if (it.split == "val") val_items.push_back(it);
  }
  REQUIRE_FALSE(val_items.empty());

  std::vector<Matrix> before;
  for (std::size_t i = 0; i < model.params.size(); ++i) before.push_back(model.params.at(i).value);
  const ValMetrics vm = trainer.validate(val_items, 4);
  CHECK(std::isfinite(vm.l_cfm));
  CHECK(std::isfinite(vm.secs_mean));
  CHECK(std::isfinite(vm.mel_mse));
  CHECK(vm.n_items == static_cast<int>(val_items.size()));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    CHECK((model.params.at(i).value - before[i]).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK_THROWS_AS(trainer.validate({}, 4), std::runtime_error);
}

TEST_CASE("config loader rejects unknown keys with the valid list") {
  test::TempDir dir("config");
  const std::string path = dir.path("cfg.toml");
  {
    std::ofstream out(path);
    out << "learning_rate = 0.0002\n";
    out << "batch_size = 2\n";
    out << "sv_dims = [8, 6]\n";
  }
  const RunSetup s = load_run_config(path);
  CHECK(s.train.learning_rate == doctest::Approx(2e-4));
  CHECK(s.train.batch_size == 2);
  REQUIRE(s.registry.sv_dims.size() == 2);
  CHECK(s.model.cte.sv_dims == std::vector<int>{8, 6});
  CHECK(s.model.vf.timbre_dim == 14);

  const std::string bad = dir.path("bad.toml");
  {
    std::ofstream out(bad);
    out << "learning_rte = 0.0002\n";
  }
  CHECK_THROWS_WITH_AS(load_run_config(bad), doctest::Contains("valid keys"), std::runtime_error);

  // JSON configs work too
  const std::string jpath = dir.path("cfg.json");
  {
    std::ofstream out(jpath);
    out << R"({"batch_size": 3, "model_dim": 32, "n_heads": 4})";
  }
  const RunSetup js = load_run_config(jpath);
  CHECK(js.train.batch_size == 3);
  CHECK(js.model.cte.model_dim == 32);
}

TEST_SUITE_END();
