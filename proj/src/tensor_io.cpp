#include "ctefm/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace ctefm {

namespace {

constexpr char kMagic[6] = {'C', 'T', 'E', 'F', 'M', '1'};

void write_raw(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_raw(std::ifstream& in, void* p, std::size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw std::runtime_error(std::string("corrupt tensor file: truncated ") + what);
  }
}

}  // namespace

void save_tensor(const std::string& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  write_raw(out, kMagic, sizeof(kMagic));
  const std::uint32_t rank = 2;
  write_raw(out, &rank, sizeof(rank));
  const std::uint64_t dims[2] = {static_cast<std::uint64_t>(m.rows()),
                                 static_cast<std::uint64_t>(m.cols())};
  write_raw(out, dims, sizeof(dims));
  std::vector<float> row(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      row[static_cast<std::size_t>(c)] = static_cast<float>(m(r, c));
    }
    write_raw(out, row.data(), row.size() * sizeof(float));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

Matrix load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[6];
  read_raw(in, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("bad tensor magic in " + path);
  }
  std::uint32_t rank = 0;
  read_raw(in, &rank, sizeof(rank), "rank");
  if (rank != 2) {
    throw std::runtime_error("unsupported tensor rank " + std::to_string(rank));
  }
  std::uint64_t dims[2];
  read_raw(in, dims, sizeof(dims), "dims");
  Matrix m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
  std::vector<float> row(static_cast<std::size_t>(dims[1]));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    read_raw(in, row.data(), row.size() * sizeof(float), "payload");
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = static_cast<double>(row[static_cast<std::size_t>(c)]);
    }
  }
  return m;
}

}  // namespace ctefm
