#include "prunelab/checkpoint.hpp"

#include <set>
#include <sstream>

#include "prunelab/binary_io.hpp"
#include "prunelab/errors.hpp"
#include "json_fields.hpp"

namespace prunelab {

nlohmann::json to_json(const ModelConfig& c) {
  return {{"enc_layers", c.enc_layers},   {"dec_layers", c.dec_layers},   {"d_model", c.d_model},
          {"n_heads", c.n_heads},         {"d_ffn", c.d_ffn},             {"vocab_size", c.vocab_size},
          {"d_in", c.d_in},               {"max_src_len", c.max_src_len}, {"max_tgt_len", c.max_tgt_len},
          {"conv_kernel", c.conv_kernel}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  JsonFields f(j, "model");
  f.get("enc_layers", c.enc_layers);
  f.get("dec_layers", c.dec_layers);
  f.get("d_model", c.d_model);
  f.get("n_heads", c.n_heads);
  f.get("d_ffn", c.d_ffn);
  f.get("vocab_size", c.vocab_size);
  f.get("d_in", c.d_in);
  f.get("max_src_len", c.max_src_len);
  f.get("max_tgt_len", c.max_tgt_len);
  f.get("conv_kernel", c.conv_kernel);
  f.get("seed", c.seed);
  f.finish();
  c.validate();
  return c;
}

nlohmann::json to_json(const TaskSpec& t) {
  return {{"seed", t.seed},
          {"n_train", t.n_train},
          {"n_test", t.n_test},
          {"t_min", t.t_min},
          {"t_max", t.t_max},
          {"vocab_size", t.vocab_size},
          {"d_in", t.d_in},
          {"sigma_clean", t.sigma_clean},
          {"sigma_other", t.sigma_other},
          {"frames_per_token", t.frames_per_token}};
}

TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec t;
  JsonFields f(j, "task");
  f.get("seed", t.seed);
  f.get("n_train", t.n_train);
  f.get("n_test", t.n_test);
  f.get("t_min", t.t_min);
  f.get("t_max", t.t_max);
  f.get("vocab_size", t.vocab_size);
  f.get("d_in", t.d_in);
  f.get("sigma_clean", t.sigma_clean);
  f.get("sigma_other", t.sigma_other);
  f.get("frames_per_token", t.frames_per_token);
  f.finish();
  t.validate();
  return t;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  os.write("PRLBCKPT", 8);
  binio::put<std::uint32_t>(os, 1);
  binio::put_string(os, to_json(model.config()).dump());
  const auto& R = model.registry();
  binio::put<std::uint64_t>(os, R.size());
  for (const auto& e : R.entries()) {
    const auto& t = model.param(e.id);
    binio::put_string(os, e.name);
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) binio::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
  }
  binio::atomic_write(path, os.str());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::istringstream is(binio::read_file(path), std::ios::binary);
  binio::expect_magic(is, "PRLBCKPT");
  if (const auto v = binio::get<std::uint32_t>(is); v != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  ModelConfig config;
  try {
    config = model_config_from_json(nlohmann::json::parse(binio::get_string(is)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  Model model = Model::build(config);
  const auto& R = model.registry();
  if (binio::get<std::uint64_t>(is) != R.size()) throw FormatError("checkpoint tensor count does not match its config");
  for (const auto& e : R.entries()) {
    if (binio::get_string(is) != e.name) throw FormatError("checkpoint tensor order differs at " + e.name);
    const auto rank = binio::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = binio::get<std::uint64_t>(is);
    if (shape != e.shape) throw FormatError("checkpoint shape mismatch for " + e.name);
    auto& data = model.param(e.id).data;
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8)))
      throw FormatError("checkpoint truncated in " + e.name);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint data");
  return model;
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Model m = load_checkpoint(path);
  if (!(m.config() == expected))
    throw MismatchError("checkpoint " + path.string() + " was built with a different model config");
  return m;
}

}  // namespace prunelab
