// SPDX-License-Identifier: Apache-2.0
//
// Model checkpoints. Layout:
//
//   modfuse-checkpoint v1\n
//   <key>=<value>\n ...            model configuration, one setting per line
//   end\n
//   u32 tensor_count
//   per tensor: u32 name_len, name bytes, u32 ndim, u64 dims[ndim],
//               f64 values[numel]
//
// Integers and doubles are little-endian; doubles are stored as their IEEE-754
// bit patterns, so a save/load round trip is bit-exact.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "modfuse/config.hpp"
#include "modfuse/fusion.hpp"

namespace modfuse {

inline constexpr std::string_view kCheckpointMagic = "modfuse-checkpoint v1";

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v, int bytes = 8) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, bytes);
}

inline std::uint64_t get_u64(std::istream& is, const std::string& source, const char* field, int bytes = 8) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), bytes)) throw Error(source + ": truncated checkpoint while reading " + field);
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::map<std::string, std::string> checkpoint_settings(const ModelConfig& m) {
  std::string hidden;
  for (std::size_t i = 0; i < m.image.hidden_dims.size(); ++i) hidden += (i ? "," : "") + std::to_string(m.image.hidden_dims[i]);
  return {
      {"modalities", to_string(m.modalities)},
      {"vocab_size", std::to_string(m.text.vocab_size)},
      {"embed_dim", std::to_string(m.text.embed_dim)},
      {"pooling", to_string(m.text.pooling)},
      {"image_dim", std::to_string(m.image.input_dim)},
      {"image_hidden", hidden.empty() ? "none" : hidden},
      {"image_output_dim", std::to_string(m.image.output_dim)},
      {"activation", to_string(m.image.activation)},
      {"merger", to_string(m.merger.kind)},
      {"gate", to_string(m.merger.gate)},
      {"normalize", m.merger.normalize ? "1" : "0"},
      {"norm_affine", m.merger.norm_affine ? "1" : "0"},
      {"lambda", format_double(m.merger.lambda)},
      {"num_labels", std::to_string(m.num_labels)},
      {"objective", to_string(m.objective)},
  };
}

inline void save_checkpoint(std::ostream& os, const FusionModel& model) {
  os << kCheckpointMagic << '\n';
  for (const auto& [k, v] : checkpoint_settings(model.config())) os << k << '=' << v << '\n';
  os << "end\n";
  const auto& params = model.parameters();
  detail::put_u64(os, params.size(), 4);
  for (const auto& p : params) {
    detail::put_u64(os, p.name.size(), 4);
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.var.shape();
    detail::put_u64(os, shape.size(), 4);
    for (std::size_t d : shape) detail::put_u64(os, d);
    for (double v : p.var.value().data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
}

inline void save_checkpoint(const std::string& path, const FusionModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  save_checkpoint(os, model);
  if (!os) throw Error("write to '" + path + "' failed");
}

inline FusionModel load_checkpoint(std::istream& is, const std::string& source = "<checkpoint>") {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line) || line != kCheckpointMagic) {
    throw ParseError(source, 1, "header", "missing '" + std::string(kCheckpointMagic) + "'");
  }
  std::map<std::string, std::string> kv;
  bool ended = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line == "end") {
      ended = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, line_no, line, "expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!ended) throw ParseError(source, line_no, "end", "configuration block is not terminated");

  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(source, line_no, key, "missing from checkpoint");
    return it->second;
  };
  ModelConfig m;
  try {
    m.modalities = detail::enum_from_string(get("modalities"), detail::kModalities, "modalities");
    m.text.vocab_size = parse_uint(get("vocab_size"), "vocab_size");
    m.text.embed_dim = parse_uint(get("embed_dim"), "embed_dim");
    m.text.pooling = detail::enum_from_string(get("pooling"), detail::kPooling, "pooling");
    m.image.input_dim = parse_uint(get("image_dim"), "image_dim");
    m.image.hidden_dims.clear();
    for (double h : parse_double_list(get("image_hidden"), "image_hidden"))
      m.image.hidden_dims.push_back(static_cast<std::size_t>(h));
    m.image.output_dim = parse_uint(get("image_output_dim"), "image_output_dim");
    m.image.activation = detail::enum_from_string(get("activation"), detail::kActivation, "activation");
    m.merger.kind = detail::enum_from_string(get("merger"), detail::kMerger, "merger");
    m.merger.gate = detail::enum_from_string(get("gate"), detail::kGate, "gate");
    m.merger.normalize = parse_bool(get("normalize"), "normalize");
    m.merger.norm_affine = parse_bool(get("norm_affine"), "norm_affine");
    m.merger.lambda = parse_double(get("lambda"), "lambda");
    m.num_labels = parse_uint(get("num_labels"), "num_labels");
    m.objective = detail::enum_from_string(get("objective"), detail::kObjective, "objective");
  } catch (const ValidationError& e) {
    throw ParseError(source, line_no, "config", e.what());
  }

  FusionModel model(m, 0);
  auto& params = model.parameters();
  const std::size_t count = detail::get_u64(is, source, "tensor count", 4);
  if (count != params.size()) {
    throw Error(source + ": checkpoint holds " + std::to_string(count) + " tensors, model has " +
                std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::size_t len = detail::get_u64(is, source, "name length", 4);
    if (len > 4096) throw Error(source + ": implausible tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw Error(source + ": truncated tensor name");
    if (name != p.name) throw Error(source + ": expected tensor '" + p.name + "', found '" + name + "'");
    const std::size_t ndim = detail::get_u64(is, source, "rank", 4);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::get_u64(is, source, "dimension");
    if (shape != p.var.shape()) {
      throw Error(source + ": tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                  shape_str(p.var.shape()));
    }
    for (auto& v : p.var.mutable_value().data()) v = std::bit_cast<double>(detail::get_u64(is, source, name.c_str()));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw Error(source + ": trailing bytes after the last tensor");
  return model;
}

inline FusionModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "' for reading");
  return load_checkpoint(is, path);
}

}  // namespace modfuse
