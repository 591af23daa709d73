#include <doctest.h>

#include "ctefm/corpus.hpp"
#include "ctefm/losses.hpp"
#include "ctefm/providers.hpp"
#include "helpers.hpp"

using namespace ctefm;

namespace {

Utterance speaker_utterance(std::uint64_t corpus_seed, int speaker, int utt, double duration) {
  const SyntheticSpeaker spk = make_speaker(corpus_seed, speaker);
  const std::uint64_t utt_seed = Rng::derive(corpus_seed, Rng::hash_str("utt"),
                                             static_cast<std::uint64_t>(speaker),
                                             static_cast<std::uint64_t>(utt));
  Utterance u;
  u.samples = render_utterance(spk, utt_seed, duration);
  u.id = "spk" + std::to_string(speaker) + "_utt" + std::to_string(utt);
  return u;
}

}  // namespace

TEST_SUITE_BEGIN("providers");

TEST_CASE("content features: shape, determinism, empty input") {
  const RegistryConfig cfg;
  const ProviderRegistry reg = build_registry(cfg);

  const Utterance utt = speaker_utterance(5, 0, 0, 4.0);
  const ContentFeatures a = extract_content(utt, reg);
  CHECK(a.frames.rows() == 200);  // 4 s at 50 fps
  CHECK(a.frames.cols() == 256);
  CHECK(a.frame_rate == 50.0);
  CHECK(a.frames.allFinite());

  const ContentFeatures b = extract_content(utt, reg);
  CHECK((a.frames - b.frames).cwiseAbs().maxCoeff() == 0.0);

  Utterance empty;
  empty.id = "empty";
  CHECK_THROWS_AS(extract_content(empty, reg), std::runtime_error);
}

TEST_CASE("content frame count scales with duration") {
  const RegistryConfig cfg;
  const ProviderRegistry reg = build_registry(cfg);
  CHECK(extract_content(speaker_utterance(6, 1, 0, 1.0), reg).frames.rows() == 50);
  CHECK(extract_content(speaker_utterance(6, 1, 1, 2.5), reg).frames.rows() == 125);
}

TEST_CASE("speaker embeddings: registry order, dims, determinism") {
  RegistryConfig cfg;
  cfg.sv_dims = {192, 128, 64};
  const ProviderRegistry reg = build_registry(cfg);
  const Utterance utt = speaker_utterance(7, 2, 0, 1.5);
  const auto embs = extract_speaker_embeddings(utt, reg);
  REQUIRE(embs.size() == 3);
  CHECK(embs[0].vector.size() == 192);
  CHECK(embs[1].vector.size() == 128);
  CHECK(embs[2].vector.size() == 64);
  CHECK(embs[0].provider_id == "synth-sv-1");
  CHECK(embs[2].provider_id == "synth-sv-3");
  for (const auto& e : embs) {
    CHECK(e.vector.allFinite());
    CHECK(e.vector.norm() == doctest::Approx(1.0));
  }
  const auto again = extract_speaker_embeddings(utt, reg);
  for (std::size_t i = 0; i < embs.size(); ++i) {
    CHECK((embs[i].vector - again[i].vector).norm() == 0.0);
  }
}

TEST_CASE("same speaker lands close, distinct speakers far") {
  const RegistryConfig cfg;
  const ProviderRegistry reg = build_registry(cfg);
  const std::uint64_t corpus_seed = 11;

  const auto e_a0 = extract_speaker_embeddings(speaker_utterance(corpus_seed, 0, 0, 1.5), reg);
  const auto e_a1 = extract_speaker_embeddings(speaker_utterance(corpus_seed, 0, 1, 1.8), reg);
  const auto e_b0 = extract_speaker_embeddings(speaker_utterance(corpus_seed, 1, 0, 1.5), reg);

  for (std::size_t p = 0; p < reg.speakers.size(); ++p) {
    CHECK(secs(e_a0[p].vector, e_a1[p].vector) >= 0.9);
    CHECK(secs(e_a0[p].vector, e_b0[p].vector) <= 0.5);
  }
}

TEST_CASE("separability across a 10-speaker corpus") {
  const RegistryConfig cfg;
  const ProviderRegistry reg = build_registry(cfg);
  const std::uint64_t corpus_seed = 13;
  const int n_speakers = 10, n_utts = 3;

  std::vector<std::vector<Vector>> embs(n_speakers);
  for (int s = 0; s < n_speakers; ++s) {
    for (int u = 0; u < n_utts; ++u) {
      embs[static_cast<std::size_t>(s)].push_back(
          reg.speakers[0]->embed(speaker_utterance(corpus_seed, s, u, 1.3)).vector);
    }
  }
  double intra = 0.0, inter = 0.0;
  int n_intra = 0, n_inter = 0;
  for (int s = 0; s < n_speakers; ++s) {
    for (int u = 0; u < n_utts; ++u) {
      for (int s2 = s; s2 < n_speakers; ++s2) {
        for (int u2 = (s2 == s ? u + 1 : 0); u2 < n_utts; ++u2) {
          const double c = secs(embs[size_t(s)][size_t(u)], embs[size_t(s2)][size_t(u2)]);
          if (s2 == s) {
            intra += c;
            ++n_intra;
          } else {
            inter += c;
            ++n_inter;
          }
        }
      }
    }
  }
  intra /= n_intra;
  inter /= n_inter;
  CHECK(intra > inter);
  CHECK(intra - inter > 0.3);
}

TEST_CASE("embed_mel gradient reaches the mel input") {
  const RegistryConfig cfg;
  const ProviderRegistry reg = build_registry(cfg);
  Matrix mel = Matrix::Random(12, cfg.mel.n_mels) * 2.0;

  auto loss = [&]() {
    nn::Tape tape;
    nn::Var m = tape.leaf(mel, true);
    nn::Var e = reg.speakers[0]->embed_mel(tape, m);
    return nn::sum_all(nn::mul(e, e)).scalar();  // ~1 by normalization, but generic path
  };
  nn::Tape tape;
  nn::Var m = tape.leaf(mel, true);
  nn::Var e = reg.speakers[0]->embed_mel(tape, m);
  nn::Var mean_e = nn::mean_all(e);
  tape.backward(mean_e);
  const Matrix& g = tape.grad_of(m.index());
  CHECK(g.cwiseAbs().maxCoeff() > 0.0);

  // plain route agrees with the graph route
  const Vector plain = dynamic_cast<const SyntheticSpeakerProvider&>(*reg.speakers[0])
                           .embed_mel_plain(mel);
  CHECK((plain.transpose() - e.val().row(0)).cwiseAbs().maxCoeff() < 1e-14);
  (void)loss;
}

TEST_CASE("segment_reference: exact size, seeded determinism, short policy") {
  Utterance utt = test::make_noise(5.0, 21);
  Rng rng(77);
  const SegmentResult seg = segment_reference(utt, 4.0, rng);
  CHECK(seg.segment.samples.size() == 64000);
  CHECK_FALSE(seg.short_reference);

  Rng rng2(77);
  const SegmentResult seg2 = segment_reference(utt, 4.0, rng2);
  CHECK(seg.segment.samples == seg2.segment.samples);

  // exactly 4 s: the only valid offset is zero
  Utterance exact = test::make_noise(4.0, 22);
  Rng rng3(5);
  const SegmentResult seg3 = segment_reference(exact, 4.0, rng3);
  CHECK(seg3.segment.samples == exact.samples);
  CHECK_FALSE(seg3.short_reference);

  // 3 s utterance, 4 s request: whole utterance, flagged
  Utterance shorty = test::make_noise(3.0, 23);
  Rng rng4(6);
  const SegmentResult seg4 = segment_reference(shorty, 4.0, rng4);
  CHECK(seg4.segment.samples == shorty.samples);
  CHECK(seg4.short_reference);
}

TEST_CASE("segment offsets cover the valid range uniformly (chi-square)") {
  // 1 s utterance, 0.5 s segments: offsets in [0, 8000]
  Utterance utt = test::make_noise(1.0, 31);
  Rng rng(123);
  const int n_draws = 10000;
  const int n_bins = 16;
  const double range = 8001.0;
  std::vector<int> counts(n_bins, 0);
  for (int i = 0; i < n_draws; ++i) {
    const SegmentResult seg = segment_reference(utt, 0.5, rng);
    // recover the offset from the id suffix
    const auto at = seg.segment.id.rfind('@');
    const auto offset = std::stol(seg.segment.id.substr(at + 1));
    REQUIRE(offset >= 0);
    REQUIRE(offset <= 8000);
    ++counts[static_cast<std::size_t>(offset / (range / n_bins))];
  }
  const double expected = static_cast<double>(n_draws) / n_bins;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 15 dof; p > 0.001 means chi2 below the 0.999 quantile (37.70)
  CHECK(chi2 < 37.70);
}

TEST_CASE("registry metadata records the stand-in ASR config") {
  const ProviderRegistry reg = build_registry(RegistryConfig{});
  REQUIRE(reg.metadata.contains("content"));
  const auto& asr = reg.metadata["content"]["replaces"];
  CHECK(asr["blocks"] == 12);
  CHECK(asr["conv_kernel"] == 31);
  CHECK(asr["attention_heads"] == 4);
  CHECK(asr["attention_dim"] == 256);
  CHECK(asr["ffn_dim"] == 1024);
  CHECK(reg.metadata["sv"].size() == 3);
}

TEST_CASE("align_frames interpolates endpoints exactly") {
  Matrix f(3, 2);
  f << 0, 0, 1, 10, 2, 20;
  const Matrix up = align_frames(f, 5);
  REQUIRE(up.rows() == 5);
  CHECK(up(0, 0) == 0.0);
  CHECK(up(4, 0) == 2.0);
  CHECK(up(2, 1) == doctest::Approx(10.0));
  const Matrix down = align_frames(up, 3);
  CHECK(down(0, 1) == 0.0);
  CHECK(down(2, 1) == 20.0);
}

TEST_SUITE_END();
