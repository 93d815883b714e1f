#pragma once

// Text checkpoint:
//
//   METADAPT-CKPT v1
//   config_digest <16 hex digits>
//   tensors <count>
//   tensor <name> <rows> <cols>
//   <row values, 17 significant digits, space separated>
//   ...
//   end

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metadapt/autodiff.hpp"
#include "metadapt/digest.hpp"
#include "metadapt/error.hpp"
#include "metadapt/format.hpp"
#include "metadapt/policy.hpp"

namespace metadapt {

inline constexpr const char* kCheckpointTag = "METADAPT-CKPT v1";

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct Checkpoint {
  std::uint64_t config_digest = 0;
  PolicyParams params;
};

inline std::string checkpoint_text(const PolicyParams& params, std::uint64_t config_digest) {
  const Manifest m = params.manifest();
  if (m.size() != params.tensors.size()) throw CheckpointError("parameter tensors do not match the manifest");
  std::string out = std::string(kCheckpointTag) + "\n";
  out += "config_digest " + hex64(config_digest) + "\n";
  out += "tensors " + std::to_string(m.size()) + "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    const ad::Array& t = params.tensors[i];
    if (t.shape != m[i].shape) throw CheckpointError("tensor '" + m[i].name + "' has the wrong shape");
    out += "tensor " + m[i].name + " " + std::to_string(t.rows()) + " " + std::to_string(t.cols()) + "\n";
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < t.cols(); ++c) out += (c ? " " : "") + fmt_double17(t(r, c));
      out += "\n";
    }
  }
  out += "end\n";
  return out;
}

namespace ckpt_detail {

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline std::size_t parse_dim(const std::string& s, const std::string& block) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw CheckpointError("block '" + block + "': malformed dimension '" + s + "'");
  }
  return v;
}

// Rebuilds the architecture from the tensor shapes, so a checkpoint is
// self-describing.
inline PolicyArchitecture infer_architecture(const std::vector<TensorSpec>& specs) {
  if (specs.size() < 3) throw CheckpointError("checkpoint holds too few tensors for a policy");
  PolicyArchitecture arch;
  arch.hidden_sizes.clear();
  arch.obs_dim = specs.front().shape.rows;
  arch.action_dim = specs.back().shape.cols;
  const std::size_t hidden = (specs.size() - 3) / 2;
  for (std::size_t i = 0; i < hidden; ++i) arch.hidden_sizes.push_back(specs[2 * i].shape.cols);
  if (specs.size() != 2 * hidden + 3 || arch.manifest() != specs) {
    throw CheckpointError("checkpoint tensors do not form a policy manifest");
  }
  return arch;
}

}  // namespace ckpt_detail

inline Checkpoint parse_checkpoint(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError("empty checkpoint");
  if (line != kCheckpointTag) {
    if (line.starts_with("METADAPT-CKPT")) throw CheckpointError("unsupported checkpoint version '" + line + "'");
    throw CheckpointError("not a checkpoint (missing '" + std::string(kCheckpointTag) + "' header)");
  }

  Checkpoint ck;
  if (!std::getline(in, line)) throw CheckpointError("truncated checkpoint: missing config_digest");
  auto words = ckpt_detail::split(line);
  if (words.size() != 2 || words[0] != "config_digest" || words[1].size() != 16) {
    throw CheckpointError("malformed config_digest line");
  }
  {
    const auto res = std::from_chars(words[1].data(), words[1].data() + 16, ck.config_digest, 16);
    if (res.ec != std::errc{} || res.ptr != words[1].data() + 16) throw CheckpointError("malformed config_digest");
  }

  if (!std::getline(in, line)) throw CheckpointError("truncated checkpoint: missing tensor count");
  words = ckpt_detail::split(line);
  if (words.size() != 2 || words[0] != "tensors") throw CheckpointError("malformed tensors line");
  const std::size_t count = ckpt_detail::parse_dim(words[1], "tensors");

  std::vector<TensorSpec> specs;
  std::vector<ad::Array> tensors;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) {
      throw CheckpointError("truncated checkpoint: block " + std::to_string(i) + " of " + std::to_string(count) +
                            " is missing");
    }
    words = ckpt_detail::split(line);
    if (words.size() != 4 || words[0] != "tensor") {
      throw CheckpointError("block " + std::to_string(i) + ": malformed tensor header '" + line + "'");
    }
    const std::string name = words[1];
    const ad::Shape shape{ckpt_detail::parse_dim(words[2], name), ckpt_detail::parse_dim(words[3], name)};
    ad::Array t(shape);
    for (std::size_t r = 0; r < shape.rows; ++r) {
      if (!std::getline(in, line)) {
        throw CheckpointError("truncated block '" + name + "': expected " + std::to_string(shape.rows) +
                              " rows, found " + std::to_string(r));
      }
      words = ckpt_detail::split(line);
      if (words.size() != shape.cols) {
        throw CheckpointError("block '" + name + "' row " + std::to_string(r) + ": expected " +
                              std::to_string(shape.cols) + " values, found " + std::to_string(words.size()));
      }
      for (std::size_t c = 0; c < shape.cols; ++c) {
        try {
          t(r, c) = parse_double(words[c]);
        } catch (const Error& e) {
          throw CheckpointError("block '" + name + "': " + e.what());
        }
      }
    }
    if (!t.all_finite()) throw CheckpointError("block '" + name + "' holds a non-finite value");
    specs.push_back({name, shape});
    tensors.push_back(std::move(t));
  }
  if (!std::getline(in, line) || line != "end") throw CheckpointError("truncated checkpoint: missing end marker");
  if (std::getline(in, line) && !line.empty()) throw CheckpointError("trailing data after end marker");

  ck.params.arch = ckpt_detail::infer_architecture(specs);
  ck.params.tensors = std::move(tensors);
  return ck;
}

inline void save_checkpoint(const std::string& path, const PolicyParams& params, std::uint64_t config_digest) {
  const std::string text = checkpoint_text(params, config_digest);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  out << text;
  if (!out.flush()) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace metadapt
