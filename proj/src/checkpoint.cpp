#include "scale/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <fmt/core.h>
#include <json.hpp>

#include "scale/errors.hpp"

namespace scale {

namespace {

using nlohmann::json;

std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream in(state);
  in >> rng;
  if (!in) throw FormatError("corrupt generator state in checkpoint");
  return rng;
}

const char* to_string(HeadMode mode) { return mode == HeadMode::multi ? "multi" : "single"; }

const char* to_string(TransformMode mode) {
  switch (mode) {
    case TransformMode::all_hidden:
      return "all_hidden";
    case TransformMode::last_hidden:
      return "last_hidden";
    case TransformMode::disabled:
      return "disabled";
  }
  return "disabled";
}

TransformMode transform_from(const std::string& s) {
  if (s == "all_hidden") return TransformMode::all_hidden;
  if (s == "last_hidden") return TransformMode::last_hidden;
  if (s == "disabled") return TransformMode::disabled;
  throw FormatError(fmt::format("unknown transform mode '{}'", s));
}

json config_json(const ModelConfig& c) {
  return {{"input_dim", c.input_dim},
          {"hidden", c.hidden},
          {"classes_per_head", c.classes_per_head},
          {"head_mode", to_string(c.head_mode)},
          {"transform", to_string(c.transform)},
          {"embedding_dim", c.embedding_dim},
          {"shared_embedding", c.shared_embedding},
          {"max_tasks", c.max_tasks},
          {"discriminator_hidden", c.discriminator_hidden},
          {"norm_eps", c.norm_eps}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.classes_per_head = j.at("classes_per_head").get<std::size_t>();
  const auto head = j.at("head_mode").get<std::string>();
  if (head != "multi" && head != "single") throw FormatError(fmt::format("unknown head mode '{}'", head));
  c.head_mode = head == "multi" ? HeadMode::multi : HeadMode::single;
  c.transform = transform_from(j.at("transform").get<std::string>());
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.shared_embedding = j.at("shared_embedding").get<bool>();
  c.max_tasks = j.at("max_tasks").get<std::size_t>();
  c.discriminator_hidden = j.at("discriminator_hidden").get<std::size_t>();
  c.norm_eps = j.at("norm_eps").get<double>();
  return c;
}

json tensor_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

json entry_json(const MemoryEntry& e) {
  return {{"x", e.x},
          {"label", e.label},
          {"task", e.task},
          {"logits", e.logits},
          {"disc_logits", e.disc_logits}};
}

MemoryEntry entry_from(const json& j) {
  MemoryEntry e;
  e.x = j.at("x").get<std::vector<double>>();
  e.label = j.at("label").get<int>();
  e.task = j.at("task").get<int>();
  e.logits = j.at("logits").get<std::vector<double>>();
  e.disc_logits = j.at("disc_logits").get<std::vector<double>>();
  return e;
}

}  // namespace

std::string serialize_checkpoint(const ScaleModel& model, const EpisodicMemory* memory) {
  json params = json::object();
  for (const auto& [name, p] : model.named_parameters()) params[name] = tensor_json(p.value());

  json doc = {{"format", "scale-checkpoint"},
              {"version", kCheckpointVersion},
              {"model",
               {{"config", config_json(model.config())},
                {"tasks", model.tasks()},
                {"head_rng", rng_state(model.head_rng())},
                {"parameters", std::move(params)}}}};
  if (memory != nullptr) {
    json slots = json::object();
    for (const auto& [task, entries] : memory->slots()) {
      json list = json::array();
      for (const auto& e : entries) list.push_back(entry_json(e));
      slots[std::to_string(task)] = std::move(list);
    }
    doc["memory"] = {{"budget", memory->budget()},
                     {"rng", rng_state(memory->reservoir_rng())},
                     {"slots", std::move(slots)}};
  }
  return doc.dump(1);
}

Checkpoint deserialize_checkpoint(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(fmt::format("checkpoint is not valid JSON: {}", e.what()));
  }
  try {
    if (doc.at("format").get<std::string>() != "scale-checkpoint") {
      throw FormatError("not a scale checkpoint");
    }
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError(fmt::format("unsupported checkpoint version {}", version));
    }
    const json& m = doc.at("model");
    ScaleModel model(config_from(m.at("config")), 0);
    for (int task : m.at("tasks").get<std::vector<int>>()) model.add_task(task);
    model.set_head_rng(rng_from_state(m.at("head_rng").get<std::string>()));

    const json& params = m.at("parameters");
    auto named = model.named_parameters();
    if (params.size() != named.size()) {
      throw FormatError(fmt::format("checkpoint holds {} parameters, model expects {}",
                                    params.size(), named.size()));
    }
    for (auto& [name, p] : named) {
      if (!params.contains(name)) throw FormatError(fmt::format("parameter '{}' missing", name));
      const json& t = params.at(name);
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      if (shape != p.value().shape()) {
        throw FormatError(fmt::format("parameter '{}' has the wrong shape", name));
      }
      p.mutable_value() = Tensor(shape[0], shape[1], t.at("data").get<std::vector<double>>());
    }

    Checkpoint out{std::move(model), std::nullopt};
    if (doc.contains("memory")) {
      const json& mem = doc.at("memory");
      EpisodicMemory memory(mem.at("budget").get<std::size_t>());
      std::map<int, std::vector<MemoryEntry>> slots;
      for (const auto& [task, list] : mem.at("slots").items()) {
        auto& entries = slots[std::stoi(task)];
        for (const auto& e : list) entries.push_back(entry_from(e));
      }
      memory.restore(std::move(slots), rng_from_state(mem.at("rng").get<std::string>()));
      out.memory = std::move(memory);
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed checkpoint: {}", e.what()));
  }
}

void write_atomically(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write {}", tmp.string()));
    out << contents;
    if (!out) throw Error(fmt::format("short write to {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const ScaleModel& model,
                     const EpisodicMemory* memory) {
  write_atomically(path, serialize_checkpoint(model, memory));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open checkpoint {}", path.string()));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

}  // namespace scale
