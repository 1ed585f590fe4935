#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "prunelab/model.hpp"

namespace prunelab {

/// Synthetic ASR-proxy task: each content token has a fixed random prototype
/// frame; an utterance repeats each prototype `frames_per_token` times and
/// adds Gaussian noise of the split's sigma.
struct TaskSpec {
  std::uint64_t seed = 7;
  int n_train = 512;
  int n_test = 256;
  int t_min = 4;
  int t_max = 12;
  int vocab_size = 64;
  int d_in = 16;
  double sigma_clean = 0.3;
  double sigma_other = 0.9;
  int frames_per_token = 2;

  void validate() const;
  bool operator==(const TaskSpec&) const = default;
};

enum class Split { train, test_clean, test_other };
std::string_view to_string(Split s);

struct Dataset {
  Split split = Split::train;
  std::vector<Sample> items;

  std::size_t size() const { return items.size(); }
  bool operator==(const Dataset& o) const;
};

struct TaskData {
  Tensor prototypes;  // [vocab x d_in]
  Dataset train;
  Dataset test_clean;
  Dataset test_other;
};

/// Deterministic in `spec`. test_clean and test_other share token sequences
/// and prototypes and differ only in noise.
TaskData generate(const TaskSpec& spec);

/// Noise-free frames for a token sequence.
Tensor clean_frames(const Tensor& prototypes, std::span<const int> tokens, int frames_per_token);

/// Binary dataset container:
///   "PRLBDSET" | u32 version=1 | u32 split | u64 count |
///   per item: u64 T_src, u64 d_in, f64[T_src*d_in], u64 len, i32[len]
/// All integers and doubles little-endian.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace prunelab
