#include "prunelab/task.hpp"

#include <random>
#include <sstream>

#include "prunelab/binary_io.hpp"
#include "prunelab/errors.hpp"

namespace prunelab {

namespace {

enum Stream : std::uint64_t { kPrototypes = 1, kTrain = 2, kTestTokens = 3, kCleanNoise = 4, kOtherNoise = 5 };

std::mt19937_64 stream_rng(std::uint64_t seed, Stream s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s)};
  return std::mt19937_64(seq);
}

std::vector<int> draw_tokens(const TaskSpec& spec, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(spec.t_min, spec.t_max);
  std::uniform_int_distribution<int> tok(kFirstContentToken, spec.vocab_size - 1);
  std::vector<int> t(static_cast<std::size_t>(len(rng)));
  for (auto& x : t) x = tok(rng);
  return t;
}

Tensor noisy(const Tensor& clean, double sigma, std::mt19937_64& rng) {
  Tensor f = clean;
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& x : f.data) x += noise(rng);
  }
  return f;
}

}  // namespace

void TaskSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid task spec: " + what); };
  if (n_train <= 0 || n_test <= 0) fail("n_train and n_test must be positive");
  if (t_min <= 0 || t_max < t_min) fail("token length range must satisfy 0 < t_min <= t_max");
  if (vocab_size <= kFirstContentToken) fail("vocab_size too small");
  if (d_in <= 0) fail("d_in must be positive");
  if (frames_per_token <= 0) fail("frames_per_token must be positive");
  if (!(sigma_clean >= 0.0)) fail("sigma_clean must be >= 0");
  if (!(sigma_other > sigma_clean)) fail("sigma_other must exceed sigma_clean");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test_clean: return "test_clean";
    case Split::test_other: return "test_other";
  }
  return "?";
}

bool Dataset::operator==(const Dataset& o) const {
  if (split != o.split || items.size() != o.items.size()) return false;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].target != o.items[i].target || items[i].frames.shape != o.items[i].frames.shape ||
        items[i].frames.data != o.items[i].frames.data)
      return false;
  }
  return true;
}

Tensor clean_frames(const Tensor& prototypes, std::span<const int> tokens, int frames_per_token) {
  const std::size_t d = prototypes.cols();
  Tensor f({tokens.size() * static_cast<std::size_t>(frames_per_token), d});
  std::size_t row = 0;
  for (int t : tokens)
    for (int r = 0; r < frames_per_token; ++r, ++row)
      for (std::size_t j = 0; j < d; ++j) f.at(row, j) = prototypes.at(static_cast<std::size_t>(t), j);
  return f;
}

TaskData generate(const TaskSpec& spec) {
  spec.validate();
  TaskData out;
  {
    auto rng = stream_rng(spec.seed, kPrototypes);
    std::normal_distribution<double> normal(0.0, 1.0);
    out.prototypes = Tensor({std::size_t(spec.vocab_size), std::size_t(spec.d_in)});
    for (auto& x : out.prototypes.data) x = normal(rng);
  }
  out.train.split = Split::train;
  out.test_clean.split = Split::test_clean;
  out.test_other.split = Split::test_other;

  auto train_rng = stream_rng(spec.seed, kTrain);
  for (int i = 0; i < spec.n_train; ++i) {
    auto tokens = draw_tokens(spec, train_rng);
    auto frames = noisy(clean_frames(out.prototypes, tokens, spec.frames_per_token), spec.sigma_clean, train_rng);
    out.train.items.push_back({std::move(frames), std::move(tokens)});
  }

  auto tok_rng = stream_rng(spec.seed, kTestTokens);
  auto clean_rng = stream_rng(spec.seed, kCleanNoise);
  auto other_rng = stream_rng(spec.seed, kOtherNoise);
  for (int i = 0; i < spec.n_test; ++i) {
    auto tokens = draw_tokens(spec, tok_rng);
    const Tensor base = clean_frames(out.prototypes, tokens, spec.frames_per_token);
    out.test_clean.items.push_back({noisy(base, spec.sigma_clean, clean_rng), tokens});
    out.test_other.items.push_back({noisy(base, spec.sigma_other, other_rng), std::move(tokens)});
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  os.write("PRLBDSET", 8);
  binio::put<std::uint32_t>(os, 1);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.split));
  binio::put<std::uint64_t>(os, ds.items.size());
  for (const auto& s : ds.items) {
    binio::put<std::uint64_t>(os, s.frames.shape.at(0));
    binio::put<std::uint64_t>(os, s.frames.shape.at(1));
    for (double v : s.frames.data) binio::put<double>(os, v);
    binio::put<std::uint64_t>(os, s.target.size());
    for (int t : s.target) binio::put<std::int32_t>(os, t);
  }
  binio::atomic_write(path, os.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::istringstream is(binio::read_file(path), std::ios::binary);
  binio::expect_magic(is, "PRLBDSET");
  if (binio::get<std::uint32_t>(is) != 1) throw FormatError("unsupported dataset version");
  Dataset ds;
  const auto split = binio::get<std::uint32_t>(is);
  if (split > 2) throw FormatError("bad split label");
  ds.split = static_cast<Split>(split);
  const auto n = binio::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto T = binio::get<std::uint64_t>(is);
    const auto d = binio::get<std::uint64_t>(is);
    if (T == 0 || d == 0 || T * d > (1u << 26)) throw FormatError("bad frame shape");
    Tensor f({T, d});
    for (auto& v : f.data) v = binio::get<double>(is);
    const auto len = binio::get<std::uint64_t>(is);
    if (len > (1u << 20)) throw FormatError("bad target length");
    std::vector<int> target(len);
    for (auto& t : target) t = binio::get<std::int32_t>(is);
    ds.items.push_back({std::move(f), std::move(target)});
  }
  return ds;
}

}  // namespace prunelab
