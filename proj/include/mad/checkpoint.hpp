#pragma once

// Parameter checkpoint files: a fixed binary preamble, a JSON header
// describing every tensor (name, shape, role tag, byte offset), and a single
// payload of raw little-endian float64 values.  Offsets are relative to the
// start of the payload.  Optimizer state (momentum buffers) is not stored;
// a loaded model starts with fresh velocities.

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "mad/common.hpp"
#include "mad/ioutil.hpp"
#include "mad/tensor.hpp"

namespace mad {

inline constexpr std::uint32_t kCheckpointMagic = 0x4D414443u;  // "CDAM" LE
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Serializes the groups in the order given.  `hyper` is an arbitrary JSON
// object embedded verbatim in the header; callers store whatever they need
// to rebuild the owning module (model hyper-parameters, training config).
inline void save_checkpoint(const std::string& path, const nlohmann::json& hyper,
                            const std::vector<const ParamGroup*>& groups) {
  nlohmann::json jgroups = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::uint64_t payload_doubles = 0;
  for (const ParamGroup* g : groups) {
    check(g != nullptr, errkind::kContract, "save_checkpoint: null group");
    nlohmann::json jparams = nlohmann::json::array();
    for (const Param& p : g->params) {
      nlohmann::json jp;
      jp["name"] = p.name;
      jp["shape"] = p.value.shape();
      jp["offset"] = offset;
      jparams.push_back(std::move(jp));
      const std::uint64_t n = static_cast<std::uint64_t>(p.value.numel());
      offset += n * sizeof(double);
      payload_doubles += n;
    }
    nlohmann::json jg;
    jg["role"] = role_name(g->role);
    jg["params"] = std::move(jparams);
    jgroups.push_back(std::move(jg));
  }

  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["hyper"] = hyper;
  header["groups"] = std::move(jgroups);
  const std::string htext = header.dump();

  std::vector<std::uint8_t> bytes;
  bytes.reserve(16 + htext.size() + payload_doubles * sizeof(double));
  put_u32(bytes, kCheckpointMagic);
  put_u32(bytes, kCheckpointVersion);
  put_u64(bytes, htext.size());
  bytes.insert(bytes.end(), htext.begin(), htext.end());
  for (const ParamGroup* g : groups)
    for (const Param& p : g->params)
      for (int i = 0; i < p.value.numel(); ++i) put_f64(bytes, p.value.data()[i]);
  write_file(path, bytes);
}

struct CheckpointData {
  nlohmann::json hyper;
  std::vector<ParamGroup> groups;
};

inline CheckpointData load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  ByteReader r(bytes, path);
  const std::uint32_t magic = r.get_u32();
  check(magic == kCheckpointMagic, errkind::kCorrupt,
        "not a checkpoint file: " + path);
  const std::uint32_t version = r.get_u32();
  check(version == kCheckpointVersion, errkind::kVersion,
        "unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const std::uint64_t hlen = r.get_u64();
  check(hlen <= r.remaining(), errkind::kCorrupt, "truncated header in " + path);
  const std::string htext(reinterpret_cast<const char*>(bytes.data()) + r.pos(),
                          static_cast<std::size_t>(hlen));

  nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
  check(!header.is_discarded(), errkind::kCorrupt, "malformed header JSON in " + path);
  check(header.value("format_version", -1) == static_cast<int>(kCheckpointVersion),
        errkind::kVersion, "header format_version mismatch in " + path);

  const std::size_t payload_start = r.pos() + static_cast<std::size_t>(hlen);
  const std::size_t payload_bytes = bytes.size() - payload_start;

  CheckpointData out;
  out.hyper = header.value("hyper", nlohmann::json::object());
  check(header.contains("groups") && header["groups"].is_array(), errkind::kCorrupt,
        "header missing groups array in " + path);
  for (const nlohmann::json& jg : header["groups"]) {
    ParamGroup g;
    g.role = role_from_name(jg.value("role", ""));
    check(jg.contains("params") && jg["params"].is_array(), errkind::kCorrupt,
          "group missing params array in " + path);
    for (const nlohmann::json& jp : jg["params"]) {
      const std::string name = jp.value("name", "");
      check(!name.empty(), errkind::kCorrupt, "unnamed parameter in " + path);
      Shape shape = jp.value("shape", Shape{});
      const std::int64_t n = shape_numel(shape);
      const std::uint64_t off = jp.value("offset", std::uint64_t{0});
      const std::uint64_t need = off + static_cast<std::uint64_t>(n) * sizeof(double);
      check(need <= payload_bytes, errkind::kCorrupt,
            "payload too short for parameter " + name + " in " + path);
      Tensor t = Tensor::zeros(shape);
      const std::uint8_t* src = bytes.data() + payload_start + off;
      for (std::int64_t i = 0; i < n; ++i) {
        std::uint64_t u = 0;
        for (int b = 0; b < 8; ++b)
          u |= static_cast<std::uint64_t>(src[i * 8 + b]) << (8 * b);
        double d;
        std::memcpy(&d, &u, sizeof d);
        t.data()[i] = d;
      }
      g.add(name, t);
    }
    out.groups.push_back(std::move(g));
  }
  return out;
}

}  // namespace mad
