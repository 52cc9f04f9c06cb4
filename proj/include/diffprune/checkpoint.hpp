#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "diffprune/denoiser.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

// File layout: the line "DPCK1", a text header of key=value lines ended by an
// empty line, then a u64 tensor count and per tensor: u32 name length, name
// bytes, u32 rank, u64 per dimension, f64 values. All integers and values
// little-endian.
struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta) {
      if (k == key) {
        v = value;
        return;
      }
    }
    meta.emplace_back(key, value);
  }
  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : meta) {
      if (k == key) return &v;
    }
    return nullptr;
  }
  std::string get(const std::string& key) const {
    const auto* v = find(key);
    if (v == nullptr) throw ValidationError("checkpoint: missing header key '" + key + "'");
    return *v;
  }
  const Tensor* tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
  void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t.detach()); }
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const std::string& path) {
  unsigned char b[sizeof(T)];
  is.read(reinterpret_cast<char*>(b), sizeof(T));
  if (!is) throw ValidationError("checkpoint: truncated file " + path);
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "DPCK1";

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("checkpoint: cannot write " + tmp);
    os << kCheckpointMagic << '\n';
    for (const auto& [k, v] : ck.meta) {
      require(!k.empty() && k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
              "checkpoint: header entries must be single-line key=value");
      os << k << '=' << v << '\n';
    }
    os << '\n';
    detail::put_le<std::uint64_t>(os, ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) detail::put_le<std::uint64_t>(os, d);
      for (double v : t.values()) detail::put_le<double>(os, v);
    }
    if (!os) throw ValidationError("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// When expected_hash is non-empty, a different config_hash in the header is
// an error unless allow_mismatch is set.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash = "",
                                  bool allow_mismatch = false) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("missing artifact: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) {
    throw ValidationError("checkpoint: bad magic in " + path.string());
  }
  Checkpoint ck;
  while (true) {
    if (!std::getline(is, line)) throw ValidationError("checkpoint: unterminated header in " + path.string());
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("checkpoint: malformed header line in " + path.string());
    ck.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto count = detail::get_le<std::uint64_t>(is, path.string());
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(is, path.string());
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = detail::get_le<std::uint32_t>(is, path.string());
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(is, path.string());
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = detail::get_le<double>(is, path.string());
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(v)));
  }
  if (!expected_hash.empty()) {
    const auto* h = ck.find("config_hash");
    if ((h == nullptr || *h != expected_hash) && !allow_mismatch) {
      throw ValidationError("checkpoint " + path.string() + " was written with config hash " +
                            (h ? *h : std::string("<none>")) + ", current config hashes to " + expected_hash +
                            " (pass --allow-hash-mismatch to load anyway)");
    }
  }
  return ck;
}

// ------------------------------------------------------- model serialization

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(item, &pos);
      if (pos != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ValidationError("expected a comma-separated list of non-negative integers, got '" + s + "'");
    }
  }
  return out;
}

inline void write_model(Checkpoint& ck, const ExpertModel& m) {
  const auto& c = m.config;
  ck.set("model.input_channels", std::to_string(c.input_channels));
  ck.set("model.stage_channels", join_sizes(c.stage_channels));
  ck.set("model.layers_per_stage", std::to_string(c.layers_per_stage));
  ck.set("model.attention_stages", join_sizes(c.attention_stages));
  ck.set("model.heads", std::to_string(c.heads));
  ck.set("model.signal_length", std::to_string(c.signal_length));
  ck.set("model.time_embed_dim", std::to_string(c.time_embed_dim));
  ck.set("model.num_classes", std::to_string(c.num_classes));
  for (const auto* p : m.parameters()) ck.add(p->name, p->value);
  for (std::size_t i = 0; i < m.importance.size(); ++i) {
    std::vector<double> v(m.importance[i].begin(), m.importance[i].end());
    ck.add("importance." + std::to_string(i), Tensor::from(std::move(v)));
  }
}

inline ModelConfig model_config_from(const Checkpoint& ck) {
  ModelConfig c;
  c.input_channels = parse_sizes(ck.get("model.input_channels")).at(0);
  c.stage_channels = parse_sizes(ck.get("model.stage_channels"));
  c.layers_per_stage = parse_sizes(ck.get("model.layers_per_stage")).at(0);
  c.attention_stages = parse_sizes(ck.get("model.attention_stages"));
  c.heads = parse_sizes(ck.get("model.heads")).at(0);
  c.signal_length = parse_sizes(ck.get("model.signal_length")).at(0);
  c.time_embed_dim = parse_sizes(ck.get("model.time_embed_dim")).at(0);
  c.num_classes = parse_sizes(ck.get("model.num_classes")).at(0);
  return c;
}

// Rebuilds the (possibly materialized) model: layers whose tensors are absent
// are removed, unit counts follow the stored shapes.
inline ExpertModel read_model(const Checkpoint& ck) {
  Rng dummy(0);
  ExpertModel m = build_model(model_config_from(ck), dummy);
  for (Section sec : {Section::encoder, Section::middle, Section::decoder}) {
    for (auto& l : m.section(sec)) {
      if (ck.tensor(l.res.conv1_weight.name) == nullptr) {
        detail::clear_layer(l);
        continue;
      }
      l.res.hidden = ck.tensor(l.res.conv1_weight.name)->dim(0);
      if (l.has_attention) {
        const Tensor* q = ck.tensor(l.attn.query_weight.name);
        require(q != nullptr, "checkpoint: missing attention weights for " + l.attn.query_weight.name);
        l.attn.heads = q->dim(0) / l.attn.head_dim;
      }
    }
  }
  for (auto* p : m.parameters()) {
    const Tensor* t = ck.tensor(p->name);
    if (t == nullptr) throw ValidationError("checkpoint: missing tensor " + p->name);
    p->value = *t;
    p->grad.clear();
  }
  const auto slots = m.width_slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Tensor* t = ck.tensor("importance." + std::to_string(i));
    require(t != nullptr, "checkpoint: missing importance order " + std::to_string(i));
    m.importance[i].clear();
    for (double v : t->values()) m.importance[i].push_back(static_cast<std::size_t>(v));
    require(m.importance[i].size() == m.width_units(slots[i]), "checkpoint: importance order size mismatch");
  }
  return m;
}

}  // namespace diffprune
