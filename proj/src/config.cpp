#include "capsnet/config.hpp"

#include <fstream>

#include <json.hpp>

namespace capsnet {

std::string head_mode_name(HeadMode mode) {
  return mode == HeadMode::kClass ? "class" : "feature";
}

HeadMode head_mode_from_name(const std::string& name) {
  if (name == "class") return HeadMode::kClass;
  if (name == "feature") return HeadMode::kFeature;
  throw ConfigError("unknown head mode '" + name + "' (expected 'class' or 'feature')");
}

void LossConfig::validate() const {
  if (!(m_minus > 0 && m_minus < m_plus && m_plus < 1))
    throw ConfigError("loss bounds must satisfy 0 < m_minus < m_plus < 1");
  if (!(beta > 0)) throw ConfigError("reconstruction scale beta must be positive");
}

void NetworkConfig::validate() const {
  loss.validate();
  if (n_class < 2) throw ConfigError("n_class must be >= 2, got " + std::to_string(n_class));
  if (head == HeadMode::kFeature && n_features < 1)
    throw ConfigError("feature mode requires n_features >= 1 (got " +
                      std::to_string(n_features) + ")");
  if (routing_iters < 1)
    throw ConfigError("routing_iters must be >= 1, got " + std::to_string(routing_iters));
  if (image_h < 17 || image_w < 17)
    throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " too small; the two 9x9 convolutions need at least 17x17");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (optimizer != "adam") throw ConfigError("unknown optimizer '" + optimizer + "'");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (resize_policy != "pad" && resize_policy != "resize")
    throw ConfigError("resize_policy must be 'pad' or 'resize', got '" + resize_policy + "'");
  if (!(split_ratio > 0 && split_ratio < 1)) throw ConfigError("split_ratio must be in (0,1)");
}

std::string NetworkConfig::to_json() const {
  nlohmann::ordered_json j;
  j["head"] = head_mode_name(head);
  j["classes"] = n_class;
  j["n_features"] = n_features;
  j["routing_iters"] = routing_iters;
  j["image"] = {{"height", image_h}, {"width", image_w}};
  j["loss"] = {{"m_plus", loss.m_plus},
               {"m_minus", loss.m_minus},
               {"lambda", loss.lambda},
               {"beta", loss.beta}};
  j["optimizer"] = {{"kind", optimizer}, {"learning_rate", learning_rate}};
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["resize_policy"] = resize_policy;
  j["split_ratio"] = split_ratio;
  return j.dump(2);
}

NetworkConfig NetworkConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  NetworkConfig cfg;
  try {
    if (j.contains("head")) cfg.head = head_mode_from_name(j["head"].get<std::string>());
    if (j.contains("classes")) cfg.n_class = j["classes"].get<int>();
    if (j.contains("n_features")) cfg.n_features = j["n_features"].get<int>();
    if (j.contains("routing_iters")) cfg.routing_iters = j["routing_iters"].get<int>();
    if (j.contains("image")) {
      cfg.image_h = j["image"].value("height", cfg.image_h);
      cfg.image_w = j["image"].value("width", cfg.image_w);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      cfg.loss.m_plus = l.value("m_plus", cfg.loss.m_plus);
      cfg.loss.m_minus = l.value("m_minus", cfg.loss.m_minus);
      cfg.loss.lambda = l.value("lambda", cfg.loss.lambda);
      cfg.loss.beta = l.value("beta", cfg.loss.beta);
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      cfg.optimizer = o.value("kind", cfg.optimizer);
      cfg.learning_rate = o.value("learning_rate", cfg.learning_rate);
    }
    if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
    if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
    if (j.contains("resize_policy")) cfg.resize_policy = j["resize_policy"].get<std::string>();
    if (j.contains("split_ratio")) cfg.split_ratio = j["split_ratio"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
  return cfg;
}

NetworkConfig NetworkConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

}  // namespace capsnet
