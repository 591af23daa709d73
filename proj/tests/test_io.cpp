#include <doctest.h>

#include <fstream>

#include "ctefm/audio.hpp"
#include "ctefm/rng.hpp"
#include "ctefm/tensor_io.hpp"
#include "helpers.hpp"

using namespace ctefm;

TEST_SUITE_BEGIN("io");

TEST_CASE("tensor container round trip at float32 precision") {
  test::TempDir tmp("tensor");
  Rng rng(3);
  Matrix m(17, 9);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal() * 10.0;
  }
  const std::string path = tmp.path("t.ctefm");
  save_tensor(path, m);
  const Matrix back = load_tensor(path);
  REQUIRE(back.rows() == m.rows());
  REQUIRE(back.cols() == m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      CHECK(back(r, c) == doctest::Approx(m(r, c)).epsilon(1e-6));
      CHECK(static_cast<float>(back(r, c)) == static_cast<float>(m(r, c)));
    }
  }
}

TEST_CASE("tensor loader rejects bad magic and truncation") {
  test::TempDir tmp("tensor_bad");
  const std::string path = tmp.path("bad.ctefm");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTAMAGIC";
  }
  CHECK_THROWS_WITH_AS(load_tensor(path), doctest::Contains("magic"), std::runtime_error);

  const std::string trunc = tmp.path("trunc.ctefm");
  save_tensor(trunc, Matrix::Ones(4, 4));
  {
    std::ifstream in(trunc, std::ios::binary);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(trunc, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size() / 2));
  }
  CHECK_THROWS_WITH_AS(load_tensor(trunc), doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("wav round trip preserves 16-bit samples") {
  test::TempDir tmp("wav");
  const Utterance utt = test::make_sine(440.0, 0.25);
  const std::string path = tmp.path("sine.wav");
  write_wav(path, utt.samples);
  const Utterance back = read_wav(path);
  REQUIRE(back.samples.size() == utt.samples.size());
  CHECK(back.sample_rate == kSampleRate);
  for (std::size_t i = 0; i < utt.samples.size(); i += 97) {
    CHECK(back.samples[i] == doctest::Approx(utt.samples[i]).epsilon(1e-3));
  }
}

TEST_CASE("wav reader rejects non-16k rates instead of resampling") {
  test::TempDir tmp("wav_rate");
  const std::string path = tmp.path("wrong.wav");
  write_wav(path, std::vector<double>(8000, 0.1), 8000);
  CHECK_THROWS_WITH_AS(read_wav(path), doctest::Contains("sample-rate mismatch"),
                       std::runtime_error);
}

TEST_CASE("utterance invariants are enforced") {
  Utterance empty;
  empty.id = "e";
  CHECK_THROWS_AS(empty.validate(), std::runtime_error);

  Utterance bad_rate = test::make_sine(100.0, 0.1);
  bad_rate.sample_rate = 22050;
  CHECK_THROWS_WITH_AS(bad_rate.validate(), doctest::Contains("sample-rate"), std::runtime_error);

  Utterance nan_utt = test::make_sine(100.0, 0.1);
  nan_utt.samples[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(nan_utt.validate(), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_SUITE_END();
