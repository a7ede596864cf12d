#pragma once

#include <Eigen/Dense>

#include <compare>
#include <cstdint>
#include <vector>

namespace svfuse {

/// Integer voxel index at a pyramid scale (1 = finest).
struct VoxelCoord {
  int i = 0;
  int j = 0;
  int k = 0;
  int scale = 1;

  auto operator<=>(const VoxelCoord&) const = default;

  Eigen::Vector3i ijk() const { return {i, j, k}; }
  static VoxelCoord from(const Eigen::Vector3i& v, int scale) { return {v.x(), v.y(), v.z(), scale}; }
};

inline int floor_div(int a, int b) {
  int q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

/// Open-addressing (linear probing) map VoxelCoord -> row index.
class VoxelHashIndex {
 public:
  VoxelHashIndex() = default;
  explicit VoxelHashIndex(std::size_t expected) { reserve(expected); }

  void reserve(std::size_t expected) {
    std::size_t cap = 16;
    while (cap < 2 * expected + 1) cap <<= 1;
    if (cap > slots_.size()) rehash(cap);
  }

  /// Inserts or overwrites.
  void insert(const VoxelCoord& key, int row) {
    if (2 * (size_ + 1) > slots_.size()) rehash(slots_.empty() ? 16 : slots_.size() * 2);
    std::size_t s = hash(key) & (slots_.size() - 1);
    while (slots_[s].row >= 0) {
      if (slots_[s].key == key) {
        slots_[s].row = row;
        return;
      }
      s = (s + 1) & (slots_.size() - 1);
    }
    slots_[s] = Slot{key, row};
    ++size_;
  }

  /// Row of `key`, or -1.
  int find(const VoxelCoord& key) const {
    if (slots_.empty()) return -1;
    std::size_t s = hash(key) & (slots_.size() - 1);
    while (slots_[s].row >= 0) {
      if (slots_[s].key == key) return slots_[s].row;
      s = (s + 1) & (slots_.size() - 1);
    }
    return -1;
  }

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return slots_.size(); }
  static constexpr std::size_t slot_bytes() { return sizeof(VoxelCoord) + sizeof(int); }

  static std::uint64_t hash(const VoxelCoord& c) {
    std::uint64_t h = static_cast<std::uint32_t>(c.i) * 0x9E3779B185EBCA87ULL;
    h ^= static_cast<std::uint32_t>(c.j) * 0xC2B2AE3D27D4EB4FULL;
    h ^= static_cast<std::uint32_t>(c.k) * 0x165667B19E3779F9ULL;
    h ^= static_cast<std::uint32_t>(c.scale) * 0x27D4EB2F165667C5ULL;
    h ^= h >> 29;
    h *= 0xBF58476D1CE4E5B9ULL;
    return h ^ (h >> 32);
  }

 private:
  struct Slot {
    VoxelCoord key;
    int row = -1;
  };

  void rehash(std::size_t cap) {
    std::vector<Slot> old;
    old.swap(slots_);
    slots_.assign(cap, Slot{});
    size_ = 0;
    for (const Slot& s : old)
      if (s.row >= 0) insert(s.key, s.row);
  }

  std::vector<Slot> slots_;
  std::size_t size_ = 0;
};

}  // namespace svfuse
