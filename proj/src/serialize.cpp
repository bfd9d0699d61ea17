#include "tws/serialize.hpp"

namespace tws {

using nlohmann::json;

json to_json(const ModelSpec& s) {
  return {{"layers", s.layers},   {"hidden", s.hidden},   {"heads", s.heads},
          {"ffn", s.ffn},         {"vocab", s.vocab},     {"max_len", s.max_len},
          {"segments", s.segments}, {"width", s.width},   {"classes", s.classes},
          {"dropout", s.dropout}, {"init_std", s.init_std}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.layers = j.value("layers", s.layers);
  s.hidden = j.value("hidden", s.hidden);
  s.heads = j.value("heads", s.heads);
  s.ffn = j.value("ffn", s.ffn);
  s.vocab = j.value("vocab", s.vocab);
  s.max_len = j.value("max_len", s.max_len);
  s.segments = j.value("segments", s.segments);
  s.width = j.value("width", s.width);
  s.classes = j.value("classes", s.classes);
  s.dropout = j.value("dropout", s.dropout);
  s.init_std = j.value("init_std", s.init_std);
  s.validate();
  return s;
}

json to_json(const QuantScheme& s) {
  return {{"kind", to_string(s.kind)}, {"granularity", to_string(s.granularity)}, {"bits", s.bits}};
}

QuantScheme scheme_from_json(const json& j) {
  QuantScheme s;
  s.kind = quant_kind_from_string(j.at("kind").get<std::string>());
  s.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  s.bits = j.at("bits").get<int>();
  s.validate();
  return s;
}

json to_json(const ActivationQuant& a) { return {{"kind", to_string(a.kind)}, {"bits", a.bits}}; }

ActivationQuant act_from_json(const json& j) {
  return {act_kind_from_string(j.at("kind").get<std::string>()), j.at("bits").get<int>()};
}

json to_json(const PrecisionMap& p) {
  json j = json::object();
  for (const auto& [k, s] : p) j[to_string(k)] = to_json(s);
  return j;
}

PrecisionMap precision_from_json(const json& j) {
  PrecisionMap p;
  for (const auto& [name, s] : j.items()) p[matrix_key_from_string(name)] = scheme_from_json(s);
  return p;
}

}  // namespace tws
