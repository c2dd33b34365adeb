// SPDX-License-Identifier: Apache-2.0
#include "car/peft.hpp"

namespace car {

const std::vector<std::string>& known_scheme_ids() {
  static const std::vector<std::string> ids{"B0",   "F0",   "F0a", "F0b", "F1", "F1a", "F1b", "F2", "F3",
                                            "F4",   "F5",   "CAR1", "CAR2", "CAR3", "M0", "M1", "M2", "J0",
                                            "J1",   "J2",   "J3",  "J4"};
  return ids;
}

AdaptationScheme build_car_scheme(const std::string& variant) {
  AdaptationScheme s;
  s.id = variant;
  s.ins.input_reprogram = true;
  s.ins.latent_reprogram = true;
  s.train = kTrainReprogram;
  if (variant == "CAR1") {
    s.ins.extractor = ExtractorKind::kAttention;
  } else if (variant == "CAR2") {
    s.ins.extractor = ExtractorKind::kConv;
  } else if (variant == "CAR3") {
    s.ins.extractor = ExtractorKind::kAttention;
    s.ins.bridge.enabled = true;
  } else {
    throw ConfigError("unknown CAR variant '" + variant + "'");
  }
  return s;
}

AdaptationScheme build_scheme(std::string id) {
  for (auto& c : id) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (id.size() == 3 && id[2] == 'A') id[2] = 'a';
  if (id.size() == 3 && id[2] == 'B') id[2] = 'b';
  const unsigned backbone = kTrainEncoder | kTrainDecoder | kTrainSsl;
  AdaptationScheme s;
  if (id.starts_with("CAR")) return build_car_scheme(id);
  s.id = id;
  if (id == "B0") {
    s.train = 0;
  } else if (id == "F0" || id == "M0") {
    s.train = backbone;
  } else if (id == "F0a") {
    s.train = backbone;
    s.head = HeadPolicy::kReinit;
  } else if (id == "F0b") {
    s.train = backbone | kTrainProbe;
    s.ins.probe = true;
  } else if (id == "F1") {
    s.train = kTrainLastLayer;
  } else if (id == "F1a") {
    s.train = kTrainLastLayer;
    s.head = HeadPolicy::kReinit;
  } else if (id == "F1b") {
    s.train = kTrainLastLayer | kTrainProbe;
    s.ins.probe = true;
  } else if (id == "F2") {
    s.train = kTrainExtra;
    s.ins.extra_layer = true;
  } else if (id == "F3" || id == "M1") {
    s.train = kTrainAdapter;
    s.ins.adapters = true;
  } else if (id == "F4" || id == "J4") {
    s.train = kTrainDecoder;
  } else if (id == "F5") {
    s.train = kTrainBias;
  } else if (id == "M2") {
    s = build_car_scheme("CAR3");
    s.id = id;
  } else if (id == "J0") {
    s.train = backbone;
  } else if (id == "J1") {
    s = build_car_scheme("CAR3");
    s.id = id;
    s.train |= backbone;
  } else if (id == "J2") {
    s = build_car_scheme("CAR3");
    s.id = id;
    s.train |= kTrainDecoder;
  } else if (id == "J3") {
    s.train = kTrainAdapter | kTrainDecoder;
    s.ins.adapters = true;
  } else {
    throw ConfigError("unknown scheme id '" + id + "'");
  }
  return s;
}

bool scheme_trains(const AdaptationScheme& s, const std::string& name, Role role, std::size_t num_layers) {
  const auto dot = name.find('.');
  const std::string module = name.substr(0, dot);
  const bool known = module == "enc" || module == "pred" || module == "joint" || module == "rp" || module == "ad" ||
                     module == "probe" || module == "extra" || module == "ssl";
  if (!known || dot == std::string::npos) {
    throw ContractError("scheme " + s.id + " has no rule for parameter '" + name + "'");
  }
  if ((s.train & kTrainBias) && role == Role::kBias) return true;
  if (module == "enc") {
    if (s.train & kTrainEncoder) return true;
    return (s.train & kTrainLastLayer) && name.starts_with(layer_prefix("enc", num_layers) + ".");
  }
  if (module == "pred") return (s.train & kTrainDecoder) != 0;
  if (module == "joint") return (s.train & kTrainDecoder) != 0;
  if (module == "rp") return (s.train & kTrainReprogram) != 0;
  if (module == "ad") return (s.train & kTrainAdapter) != 0;
  if (module == "probe") return (s.train & kTrainProbe) != 0;
  if (module == "extra") return (s.train & kTrainExtra) != 0;
  return (s.train & kTrainSsl) != 0;
}

std::string insertion_prefix(const std::string& root, std::size_t point, std::size_t width, bool shared) {
  if (point == 0) return root + ".in";
  if (shared) return root + ".shared" + std::to_string(width);
  return root + ".lat" + std::to_string(point);
}

}  // namespace car
