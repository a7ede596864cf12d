#include "svfuse/raster_io.hpp"

#include "svfuse/binary_io.hpp"

namespace svfuse {

void write_svdp(const std::filesystem::path& path, const Eigen::MatrixXd& raster) {
  binio::Writer w;
  w.bytes("SVDP");
  w.u32(static_cast<std::uint32_t>(raster.rows()));
  w.u32(static_cast<std::uint32_t>(raster.cols()));
  for (Eigen::Index r = 0; r < raster.rows(); ++r)
    for (Eigen::Index c = 0; c < raster.cols(); ++c) w.f32(static_cast<float>(raster(r, c)));
  w.save(path);
}

Eigen::MatrixXd read_svdp(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("SVDP");
  const std::uint32_t h = r.u32();
  const std::uint32_t w = r.u32();
  Eigen::MatrixXd out(h, w);
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x) out(y, x) = r.f32();
  if (!r.at_end()) throw DataError("trailing bytes in " + path.string());
  return out;
}

}  // namespace svfuse
