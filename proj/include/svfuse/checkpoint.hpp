#pragma once

// "SVWT" weight files: magic, u32 version, u32 tensor count, then per tensor
// u32 name length, name bytes, u32 ndim, ndim x u32 dims, f32 values
// (row-major).

#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "svfuse/binary_io.hpp"
#include "svfuse/layers.hpp"

namespace svfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
binio::Writer checkpoint_bytes(const nn::ParamList<Scalar>& params) {
  binio::Writer w;
  w.bytes("SVWT");
  w.u32(kCheckpointVersion);
  w.u32(std::uint32_t(params.size()));
  for (const nn::Tensor<Scalar>* p : params) {
    w.u32(std::uint32_t(p->name.size()));
    w.bytes(p->name);
    w.u32(2);
    w.u32(std::uint32_t(p->value.rows()));
    w.u32(std::uint32_t(p->value.cols()));
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) w.f32(static_cast<float>(p->value(r, c)));
  }
  return w;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const nn::ParamList<Scalar>& params) {
  std::set<std::string> seen;
  for (const auto* p : params)
    if (!seen.insert(p->name).second) throw std::invalid_argument("save_checkpoint: duplicate tensor " + p->name);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  checkpoint_bytes(params).save(path);
}

/// Fills `params` by name. Every parameter must be present with its shape;
/// extra tensors in the file are an error too.
template <typename Scalar>
void load_checkpoint(const std::filesystem::path& path, const nn::ParamList<Scalar>& params) {
  binio::Reader r(path);
  r.expect_magic("SVWT");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(v) + " in " + path.string());
  std::map<std::string, nn::Tensor<Scalar>*> by_name;
  for (auto* p : params) by_name[p->name] = p;
  const std::uint32_t n = r.u32();
  std::set<std::string> loaded;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t ndim = r.u32();
    if (ndim != 2) throw DataError("tensor " + name + " has " + std::to_string(ndim) + " dims in " + path.string());
    const std::uint32_t rows = r.u32(), cols = r.u32();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("unexpected tensor " + name + " in " + path.string());
    nn::Tensor<Scalar>& t = *it->second;
    if (t.value.rows() != Eigen::Index(rows) || t.value.cols() != Eigen::Index(cols)) {
      throw DataError("tensor " + name + " is " + nn::shape_str(rows, cols) + " in " + path.string() + ", model expects " +
                      nn::shape_str(t.value.rows(), t.value.cols()));
    }
    for (Eigen::Index a = 0; a < t.value.rows(); ++a)
      for (Eigen::Index b = 0; b < t.value.cols(); ++b) t.value(a, b) = Scalar(r.f32());
    loaded.insert(name);
  }
  if (!r.at_end()) throw DataError("trailing bytes in " + path.string());
  for (const auto& [name, p] : by_name)
    if (!loaded.count(name)) throw DataError("checkpoint " + path.string() + " lacks tensor " + name);
}

}  // namespace svfuse
