#pragma once

// Binary checkpoint, little-endian:
//   "DBCK" | u32 version | u64 header length | header (UTF-8 JSON)
//   then tensors until EOF: u32 name length, name, u32 rank, u64 extents..., f32 payload.
// The header holds the training config, vocabulary, iteration counter, RNG
// state and Adam step count. Adam moments are stored as tensors named
// "adam.m.<param>" and "adam.v.<param>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mcdiff/config.hpp"

namespace mcdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'D', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  std::vector<std::string> vocab;
  std::uint64_t iteration = 0;
  Rng::State rng_state{};
  std::uint64_t adam_step = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  if (s.empty() || s.size() > 16) throw FormatError("checkpoint: bad rng word '" + s + "'");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= std::uint64_t(c - '0');
    else if (c >= 'a' && c <= 'f') v |= std::uint64_t(c - 'a' + 10);
    else throw FormatError("checkpoint: bad rng word '" + s + "'");
  }
  return v;
}

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(V));
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  template <typename V>
  V get(const char* what) {
    if (buf.size() - pos < sizeof(V)) throw FormatError(std::string("checkpoint: truncated while reading ") + what);
    V v;
    std::memcpy(&v, buf.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    if (buf.size() - pos < n) throw FormatError(std::string("checkpoint: truncated while reading ") + what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  json header{{"config", ck.config},
              {"vocab", ck.vocab},
              {"iteration", ck.iteration},
              {"adam_step", ck.adam_step},
              {"rng_state", json::array()}};
  for (auto w : ck.rng_state) header["rng_state"].push_back(detail::hex64(w));
  const std::string h = header.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put(out, kCheckpointVersion);
  detail::put(out, std::uint64_t(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  for (const auto& [name, t] : ck.tensors) {
    detail::put(out, std::uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put(out, std::uint32_t(t.rank()));
    for (auto e : t.shape()) detail::put(out, std::uint64_t(e));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + t.size() * sizeof(float));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic (expected DBCK)");
  detail::Reader r{buf, 4};
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto hlen = r.get<std::uint64_t>("header length");
  if (hlen > buf.size()) throw FormatError("checkpoint: truncated header");
  const std::string h = r.bytes(std::size_t(hlen), "header");
  Checkpoint ck;
  try {
    const json j = json::parse(h);
    ck.config = j.at("config").get<TrainConfig>();
    ck.vocab = j.at("vocab").get<std::vector<std::string>>();
    ck.iteration = j.at("iteration").get<std::uint64_t>();
    ck.adam_step = j.at("adam_step").get<std::uint64_t>();
    const auto& rs = j.at("rng_state");
    if (!rs.is_array() || rs.size() != 4) throw FormatError("checkpoint: rng_state must have 4 words");
    for (std::size_t i = 0; i < 4; ++i) ck.rng_state[i] = detail::parse_hex64(rs[i].get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  while (r.pos < buf.size()) {
    const auto nlen = r.get<std::uint32_t>("tensor name length");
    std::string name = r.bytes(nlen, "tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = std::size_t(r.get<std::uint64_t>("tensor extent"));
      if (e == 0 || e > (std::size_t{1} << 32)) throw FormatError("checkpoint: tensor '" + name + "' bad extent");
      n *= e;
    }
    if ((buf.size() - r.pos) / sizeof(float) < n) throw FormatError("checkpoint: truncated payload of '" + name + "'");
    std::vector<float> data(n);
    std::memcpy(data.data(), buf.data() + r.pos, n * sizeof(float));
    r.pos += n * sizeof(float);
    ck.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return ck;
}

// Writes through a temporary file and renames, so a crash never leaves a
// half-written checkpoint under `path`.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  write_file_bytes(tmp, encode_checkpoint(ck));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Model parameters only, from a checkpoint.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  Model<T> m(ck.config.model, ck.config.seed, PromptVocab(ck.vocab, ck.config.model.cond.text_len));
  for (auto& [name, p] : m.named_params()) {
    const Tensor<float>* t = ck.find(name);
    if (!t) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (t->shape() != p->value.shape())
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(t->shape()) + ", model expects " +
                        shape_str(p->value.shape()));
    p->value = t->cast<T>();
  }
  return m;
}

}  // namespace mcdiff
