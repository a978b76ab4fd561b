#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/crc32.hpp"
#include "caps/params.hpp"

namespace caps {

// Checkpoint container:
//   "CAPSCKPT" (8 bytes)
//   u32 LE header length
//   UTF-8 JSON header: {"records":[{name,dtype,shape,offset,length},...],
//                       "meta": {...}}   (offsets relative to payload start)
//   raw little-endian row-major f32 payloads
//   u32 LE CRC-32 of the payload region
struct Checkpoint {
  ParameterStore params;
  nlohmann::json meta;  // config echo, seeds, training log
};

namespace detail {
inline void put_u32le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}
inline uint32_t get_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json records = nlohmann::json::array();
  std::string payload;
  for (const auto& name : ckpt.params.names()) {
    const auto& e = ckpt.params.entry(name);
    size_t offset = payload.size();
    size_t length = e.value.size() * sizeof(float);
    payload.resize(offset + length);
    // assumes little-endian host, which is all we target
    std::memcpy(payload.data() + offset, e.value.data.data(), length);
    records.push_back({{"name", name},
                       {"dtype", "f32"},
                       {"shape", {e.value.rows, e.value.cols}},
                       {"offset", offset},
                       {"length", length}});
  }
  nlohmann::json header = {{"records", records}, {"meta", ckpt.meta}};
  std::string header_text = header.dump();

  std::string out = "CAPSCKPT";
  detail::put_u32le(out, static_cast<uint32_t>(header_text.size()));
  out += header_text;
  out += payload;
  detail::put_u32le(out, crc32(payload.data(), payload.size()));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const uint8_t*>(bytes.data());
  if (bytes.size() < 16 || bytes.compare(0, 8, "CAPSCKPT") != 0)
    throw ValidationError("checkpoint: bad magic");
  uint32_t hlen = detail::get_u32le(p + 8);
  if (bytes.size() < 12 + hlen + 4)
    throw ValidationError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
  }
  size_t payload_start = 12 + hlen;
  size_t payload_len = bytes.size() - payload_start - 4;
  uint32_t stored_crc = detail::get_u32le(p + bytes.size() - 4);
  uint32_t actual_crc = crc32(bytes.data() + payload_start, payload_len);
  if (stored_crc != actual_crc)
    throw ValidationError("checkpoint: CRC mismatch");

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  Rng dummy(0);
  for (const auto& rec : header.at("records")) {
    std::string name = rec.at("name");
    if (rec.at("dtype") != "f32")
      throw ValidationError("checkpoint: unsupported dtype for " + name);
    int rows = rec.at("shape")[0];
    int cols = rec.at("shape")[1];
    size_t offset = rec.at("offset");
    size_t length = rec.at("length");
    if (offset + length > payload_len)
      throw ValidationError("checkpoint: record '" + name + "' out of bounds");
    if (length != static_cast<size_t>(rows) * cols * sizeof(float))
      throw ValidationError("checkpoint: record '" + name + "' length/shape mismatch");
    ckpt.params.create(name, rows, cols, InitRule::Zeros, dummy);
    std::memcpy(ckpt.params.value(name).data.data(),
                bytes.data() + payload_start + offset, length);
  }
  return ckpt;
}

inline uint32_t checkpoint_payload_crc(const std::string& bytes) {
  if (bytes.size() < 4) throw ValidationError("checkpoint: too short");
  return detail::get_u32le(reinterpret_cast<const uint8_t*>(bytes.data()) + bytes.size() - 4);
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open checkpoint for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw RuntimeFailure("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace caps
