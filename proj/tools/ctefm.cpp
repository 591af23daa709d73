#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ctefm/config.hpp"
#include "ctefm/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_synth_corpus(const std::string& out_dir, const ctefm::CorpusSpec& spec) {
  const std::string manifest = ctefm::synth_corpus(out_dir, spec);
  std::cout << manifest << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::string& out_dir, int max_iters_override, long long seed_override,
              const std::string& resume_path) {
  ctefm::RunSetup setup =
      config_path.empty() ? ctefm::default_run_setup() : ctefm::load_run_config(config_path);
  if (max_iters_override >= 0) setup.train.max_iters = max_iters_override;
  if (seed_override >= 0) setup.train.seed = static_cast<std::uint64_t>(seed_override);
  setup.finalize();

  if (!fs::exists(manifest_path)) {
    std::cerr << "manifest not found: " << manifest_path << "\n";
    return 2;
  }

  std::unique_ptr<ctefm::CtefmModel> model;
  std::int64_t start_iter = 0;
  if (!resume_path.empty()) {
    const ctefm::CheckpointState st = ctefm::load_checkpoint(resume_path, model);
    setup.train = st.train_cfg;
    if (max_iters_override >= 0) setup.train.max_iters = max_iters_override;
    setup.registry = st.registry_cfg;
    setup.mel = st.registry_cfg.mel;
    setup.model = st.model_cfg;
    start_iter = st.iteration;
  } else {
    model = std::make_unique<ctefm::CtefmModel>(setup.model);
    model->init(ctefm::Rng::derive(setup.train.seed, ctefm::Rng::hash_str("model-init")));
  }

  const ctefm::ProviderRegistry registry = ctefm::build_registry(setup.registry);
  const ctefm::TrainRunResult result =
      ctefm::run_training(manifest_path, out_dir, *model, registry, setup.train, setup.registry,
                          setup.mel, start_iter);
  std::cout << result.final_checkpoint << "\n";
  return 0;
}

int cmd_convert(const ctefm::ConversionRequest& req, const ctefm::VocoderAdapter& vocoder) {
  ctefm::convert(req, vocoder);
  std::cout << req.output_path << "\n";
  return 0;
}

int cmd_eval(const std::string& manifest, const std::string& checkpoint,
             const std::string& report_path, const ctefm::EvalOptions& opts) {
  const nlohmann::json report = ctefm::run_eval(manifest, checkpoint, opts);
  std::ofstream out(report_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report: " + report_path);
  out << report.dump(2) << "\n";
  std::cout << report_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CTEFM-VC: zero-shot voice conversion via content-aware timbre "
               "ensembles and conditional flow matching"};
  app.require_subcommand(1);

  // synth-corpus
  auto* synth = app.add_subcommand("synth-corpus", "Generate a deterministic synthetic corpus");
  std::string out_dir;
  ctefm::CorpusSpec spec;
  long long synth_seed = 7;
  synth->add_option("--n-speakers", spec.n_speakers, "Number of speakers")->capture_default_str();
  synth->add_option("--n-utts", spec.n_utts, "Utterances per speaker")->capture_default_str();
  synth->add_option("--out-dir", out_dir, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Corpus seed")->capture_default_str();
  synth->add_option("--min-duration-s", spec.min_duration_s, "Shortest utterance")
      ->capture_default_str();
  synth->add_option("--max-duration-s", spec.max_duration_s, "Longest utterance")
      ->capture_default_str();
  synth->add_flag("--force", spec.force, "Write into a non-empty directory");

  // train
  auto* train = app.add_subcommand("train", "Train on a manifest");
  std::string config_path, manifest_path, train_out_dir, resume_path;
  int max_iters_override = -1;
  long long train_seed_override = -1;
  train->add_option("--config", config_path, "TOML or JSON key-value config");
  train->add_option("--manifest", manifest_path, "JSON-lines dataset manifest")->required();
  train->add_option("--out-dir", train_out_dir, "Checkpoint/metrics directory")->required();
  train->add_option("--max-iters", max_iters_override, "Override max_iters");
  train->add_option("--seed", train_seed_override, "Override seed");
  train->add_option("--resume", resume_path, "Resume from a checkpoint");

  // convert
  auto* conv = app.add_subcommand("convert", "Zero-shot conversion of one utterance");
  ctefm::ConversionRequest req;
  ctefm::VocoderAdapter vocoder;
  long long convert_seed = 0;
  conv->add_option("--source", req.source_path, "Source WAV (content)")->required();
  conv->add_option("--reference", req.reference_path, "Reference WAV (timbre)")->required();
  conv->add_option("--output", req.output_path, "Output file")->required();
  conv->add_option("--checkpoint", req.checkpoint_path, "Trained checkpoint")->required();
  conv->add_option("--euler-steps", req.euler_steps, "Sampler steps")->capture_default_str();
  conv->add_option("--seed", convert_seed, "Sampling seed")->capture_default_str();
  conv->add_option("--vocoder", vocoder.id, "identity-mel | external")->capture_default_str();
  conv->add_option("--vocoder-cmd", vocoder.command,
                   "External vocoder command, invoked as: cmd <mel> <out>");

  // eval
  auto* eval = app.add_subcommand("eval", "Objective evaluation on held-out items");
  std::string eval_manifest, eval_checkpoint, report_path;
  ctefm::EvalOptions eopts;
  long long eval_seed = 0;
  eval->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
  eval->add_option("--checkpoint", eval_checkpoint, "Trained checkpoint")->required();
  eval->add_option("--report", report_path, "Output JSON report")->required();
  eval->add_option("--pairs", eopts.n_pairs, "Number of eval pairs (0: one per item)")
      ->capture_default_str();
  eval->add_option("--euler-steps", eopts.euler_steps, "Sampler steps")->capture_default_str();
  eval->add_option("--seed", eval_seed, "Pairing/sampling seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      spec.seed = static_cast<std::uint64_t>(synth_seed);
      return cmd_synth_corpus(out_dir, spec);
    }
    if (train->parsed()) {
      return cmd_train(config_path, manifest_path, train_out_dir, max_iters_override,
                       train_seed_override, resume_path);
    }
    if (conv->parsed()) {
      req.seed = static_cast<std::uint64_t>(convert_seed);
      return cmd_convert(req, vocoder);
    }
    if (eval->parsed()) {
      eopts.seed = static_cast<std::uint64_t>(eval_seed);
      return cmd_eval(eval_manifest, eval_checkpoint, report_path, eopts);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
