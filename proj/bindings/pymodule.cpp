#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ctefm/corpus.hpp"
#include "ctefm/losses.hpp"
#include "ctefm/pipeline.hpp"

namespace py = pybind11;
using namespace ctefm;

PYBIND11_MODULE(_ctefm, m) {
  m.doc() = "Zero-shot voice conversion core: mel features, OT flow matching, "
            "SSIM losses, synthetic corpus and conversion entry points";

  m.def(
      "compute_mel",
      [](const Eigen::VectorXd& samples, int n_mels, int n_fft, int win_length, int hop_length) {
        Utterance utt;
        utt.samples.assign(samples.data(), samples.data() + samples.size());
        utt.id = "py";
        MelConfig cfg;
        cfg.n_mels = n_mels;
        cfg.n_fft = n_fft;
        cfg.win_length = win_length;
        cfg.hop_length = hop_length;
        return compute_mel(utt, cfg).frames;
      },
      py::arg("samples"), py::arg("n_mels") = 80, py::arg("n_fft") = 1024,
      py::arg("win_length") = 1024, py::arg("hop_length") = 256,
      "Log mel-spectrogram of a 16 kHz waveform, frames by bins");

  m.def(
      "ot_flow",
      [](double t, const Matrix& z, const Matrix& x, double sigma_min) {
        return ot_flow(t, z, x, FlowSchedule{sigma_min});
      },
      py::arg("t"), py::arg("z"), py::arg("x"), py::arg("sigma_min") = 0.0001);

  m.def(
      "target_vector",
      [](const Matrix& x0, const Matrix& x1, double sigma_min) {
        return target_vector(x0, x1, FlowSchedule{sigma_min});
      },
      py::arg("x0"), py::arg("x1"), py::arg("sigma_min") = 0.0001);

  m.def(
      "euler_integrate",
      [](const std::function<Matrix(const Matrix&, double)>& field, const Matrix& x0, int steps) {
        return euler_integrate(field, x0, steps);
      },
      py::arg("field"), py::arg("x0"), py::arg("steps"),
      "Fixed-step explicit Euler integration of field(x, t) over t in [0, 1)");

  m.def(
      "ssim",
      [](const Vector& a, const Vector& b, double c1, double c2) {
        return ssim(a, b, SSIMConstants{c1, c2});
      },
      py::arg("a"), py::arg("b"), py::arg("c1") = 0.01, py::arg("c2") = 0.03);

  m.def(
      "timbre_loss",
      [](const std::vector<Vector>& ref, const std::vector<Vector>& conv, double c1, double c2) {
        return timbre_loss(ref, conv, SSIMConstants{c1, c2});
      },
      py::arg("ref_embs"), py::arg("conv_embs"), py::arg("c1") = 0.01, py::arg("c2") = 0.03);

  m.def(
      "total_loss",
      [](double l_cfm, double l_tim, double lambda_tim) {
        return total_loss(l_cfm, l_tim, LossWeights{lambda_tim});
      },
      py::arg("l_cfm"), py::arg("l_tim"), py::arg("lambda_tim") = 0.05);

  m.def("secs", &secs, py::arg("a"), py::arg("b"), "Speaker embedding cosine similarity");

  m.def(
      "render_utterance",
      [](std::uint64_t corpus_seed, int speaker, std::uint64_t utt_seed, double duration_s) {
        const SyntheticSpeaker spk = make_speaker(corpus_seed, speaker);
        const auto samples = render_utterance(spk, utt_seed, duration_s);
        return Eigen::Map<const Eigen::VectorXd>(samples.data(),
                                                 static_cast<Eigen::Index>(samples.size()))
            .eval();
      },
      py::arg("corpus_seed"), py::arg("speaker"), py::arg("utt_seed"), py::arg("duration_s"),
      "Deterministic synthetic speaker audio at 16 kHz");

  m.def(
      "synth_corpus",
      [](const std::string& out_dir, int n_speakers, int n_utts, std::uint64_t seed, bool force) {
        CorpusSpec spec;
        spec.n_speakers = n_speakers;
        spec.n_utts = n_utts;
        spec.seed = seed;
        spec.force = force;
        return synth_corpus(out_dir, spec);
      },
      py::arg("out_dir"), py::arg("n_speakers") = 10, py::arg("n_utts") = 10, py::arg("seed") = 7,
      py::arg("force") = false, "Write a synthetic corpus; returns the manifest path");

  m.def(
      "convert",
      [](const std::string& source, const std::string& reference, const std::string& output,
         const std::string& checkpoint, int euler_steps, std::uint64_t seed) {
        ConversionRequest req;
        req.source_path = source;
        req.reference_path = reference;
        req.output_path = output;
        req.checkpoint_path = checkpoint;
        req.euler_steps = euler_steps;
        req.seed = seed;
        return convert(req).mel.frames;
      },
      py::arg("source"), py::arg("reference"), py::arg("output"), py::arg("checkpoint"),
      py::arg("euler_steps") = 20, py::arg("seed") = 0,
      "Zero-shot conversion; writes the mel tensor file and returns the frames");

  m.def("load_tensor", &load_tensor, py::arg("path"));
}
