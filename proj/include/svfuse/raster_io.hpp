#pragma once

#include <Eigen/Dense>

#include <filesystem>

namespace svfuse {

/// "SVDP" raster: magic, u32 H, u32 W, H*W little-endian f32, row-major.
void write_svdp(const std::filesystem::path& path, const Eigen::MatrixXd& raster);
Eigen::MatrixXd read_svdp(const std::filesystem::path& path);

}  // namespace svfuse
