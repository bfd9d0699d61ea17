#include "tws/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "tws/serialize.hpp"

namespace tws {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'T', 'W', 'S', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

std::string pack_bits(const std::vector<bool>& bits) {
  std::string out((bits.size() + 7) / 8, '\0');
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out[i / 8] = static_cast<char>(out[i / 8] | (1 << (i % 8)));
  }
  return out;
}

json shape_json(const Tensor& t) { return t.shape(); }

}  // namespace

void save_checkpoint(const std::string& path, const Model& m, const std::string& stage) {
  std::string data;
  json tensors = json::array();
  json packed = json::array();
  for (const Parameter* p : m.parameters()) {
    const std::size_t off = data.size();
    for (double v : p->value.span()) put_f32(data, v);
    tensors.push_back({{"name", p->name}, {"shape", shape_json(p->value)}, {"offset", off},
                       {"bytes", data.size() - off}});
  }
  json matrices = json::array();
  for (const WeightSlot* s : m.slots()) {
    json branches = json::array();
    for (const auto& b : s->branches) {
      branches.push_back({{"param", b.latent.name}, {"scheme", to_json(b.scheme)}});
      const QuantKind kind = b.scheme.kind;
      if (kind == QuantKind::kFull || kind == QuantKind::kUniform) continue;
      const Tensor& w = b.latent.value;
      std::vector<bool> signs(w.size());
      std::vector<bool> mask;
      std::vector<double> scales;
      if (kind == QuantKind::kTernary) {
        const TernaryResult t = ternarize(w, b.scheme.granularity);
        mask.assign(w.size(), false);
        for (auto i : t.nonzero) mask[i] = true;
        scales = t.alpha;
      } else {
        scales = kind == QuantKind::kBinary ? binarize(w, b.scheme.granularity).alpha
                                            : binarize_with_ternary_scale(w, b.scheme.granularity).alpha;
      }
      for (std::size_t i = 0; i < w.size(); ++i) signs[i] = w[i] >= 0.0;
      json entry = {{"param", b.latent.name}, {"kind", to_string(kind)}, {"elements", w.size()}};
      entry["signs_offset"] = data.size();
      data += pack_bits(signs);
      if (!mask.empty()) {
        entry["mask_offset"] = data.size();
        data += pack_bits(mask);
      }
      entry["scales_offset"] = data.size();
      entry["scales"] = scales.size();
      for (double a : scales) put_f32(data, a);
      entry["bytes"] = data.size() - entry["signs_offset"].get<std::size_t>();
      packed.push_back(entry);
    }
    matrices.push_back({{"matrix", to_string(s->key)}, {"branches", branches}});
  }
  json calibrated = json::array();
  for (ActSite* site : const_cast<Model&>(m).act_sites()) {
    if (site->calibrated) calibrated.push_back(site->name);
  }
  const json header = {{"format", "tws-checkpoint"}, {"version", 1},           {"stage", stage},
                       {"spec", to_json(m.spec)},    {"activation", to_json(m.act)},
                       {"matrices", matrices},       {"calibrated", calibrated},
                       {"tensors", tensors},         {"packed", packed}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(path + ": cannot open for writing");
  out.write(kMagic, sizeof kMagic);
  std::string len;
  const auto n = static_cast<std::uint64_t>(text.size());
  put_u32(len, static_cast<std::uint32_t>(n & 0xFFFFFFFFu));
  put_u32(len, static_cast<std::uint32_t>(n >> 32));
  out.write(len.data(), static_cast<std::streamsize>(len.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw CheckpointError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path + ": cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path + ": not a checkpoint");
  }
  const std::uint64_t len = get_u32(bytes, 8) | (static_cast<std::uint64_t>(get_u32(bytes, 12)) << 32);
  if (16 + len > bytes.size()) throw CheckpointError(path + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(16, len));
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": bad header: " + e.what());
  }
  if (header.value("format", "") != "tws-checkpoint" || header.value("version", 0) != 1) {
    throw CheckpointError(path + ": unsupported format");
  }
  const std::size_t base = 16 + len;

  Checkpoint ck;
  ck.stage = header.at("stage").get<std::string>();
  const ModelSpec spec = spec_from_json(header.at("spec"));
  PrecisionMap precision;
  std::map<MatrixKey, std::vector<std::pair<QuantScheme, std::string>>> branches;
  for (const auto& mj : header.at("matrices")) {
    const MatrixKey key = matrix_key_from_string(mj.at("matrix").get<std::string>());
    for (const auto& bj : mj.at("branches")) {
      branches[key].emplace_back(scheme_from_json(bj.at("scheme")), bj.at("param").get<std::string>());
    }
    if (branches[key].empty() || branches[key].size() > 2) throw CheckpointError("bad branch list for " + to_string(key));
    precision[key] = branches[key][0].first;
  }
  Model m = build_model(spec, precision, act_from_json(header.at("activation")), 0);
  for (WeightSlot* s : m.slots()) {
    const auto& bl = branches.at(s->key);
    s->branches.resize(bl.size(), s->branches[0]);
    for (std::size_t i = 0; i < bl.size(); ++i) {
      s->branches[i].scheme = bl[i].first;
      s->branches[i].latent.name = bl[i].second;
    }
  }
  std::map<std::string, Parameter*> by_name;
  for (const ParamRef& r : m.parameters()) by_name[r.param->name] = r.param;
  for (ActSite* site : m.act_sites()) by_name[site->step.name] = &site->step;
  for (const auto& tj : header.at("tensors")) {
    const std::string name = tj.at("name").get<std::string>();
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError(path + ": unknown tensor " + name);
    Tensor& t = it->second->value;
    const auto shape = tj.at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape()) throw CheckpointError(path + ": shape mismatch for " + name);
    const std::size_t off = base + tj.at("offset").get<std::size_t>();
    if (off + 4 * t.size() > bytes.size()) throw CheckpointError(path + ": truncated data for " + name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, off + 4 * i)));
    }
  }
  for (WeightSlot* s : m.slots()) {
    for (auto& b : s->branches) snap_latent(b.latent.value);
  }
  for (const auto& name : header.at("calibrated")) {
    for (ActSite* site : m.act_sites()) {
      if (site->name == name.get<std::string>()) site->calibrated = true;
    }
  }
  ck.model = std::move(m);
  return ck;
}

}  // namespace tws
