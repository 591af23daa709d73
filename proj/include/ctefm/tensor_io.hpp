#pragma once

#include <Eigen/Dense>
#include <string>

namespace ctefm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Versioned binary tensor container: magic "CTEFM1", little-endian u32 rank,
// u64 dims, row-major float32 payload. Used for mel/feature files and the
// identity-mel vocoder output.
void save_tensor(const std::string& path, const Matrix& m);
Matrix load_tensor(const std::string& path);

}  // namespace ctefm
