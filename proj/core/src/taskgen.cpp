#include "cbench/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace cbench {

using json = nlohmann::json;

std::size_t TaskTemplate::label_region_index() const {
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (regions[i].kind == RegionKind::LabelVariable) return i;
  }
  throw TaskSpecError("template '" + name + "': no label_variable region");
}

int TaskTemplate::type_class(const std::string& type) const {
  return type == types.front() ? 0 : 1;
}

std::string join_regions(const std::vector<std::string>& region_texts) {
  std::string out;
  for (std::size_t i = 0; i < region_texts.size(); ++i) {
    if (i > 0) out += ' ';
    out += region_texts[i];
  }
  return out;
}

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw TaskSpecError(where + ": " + what);
}

std::vector<std::string> string_list(const json& j, const std::string& where) {
  if (!j.is_array()) fail(where, "expected an array of strings");
  std::vector<std::string> out;
  for (const auto& v : j) {
    if (!v.is_string()) fail(where, "expected an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

void check_options_nonempty(const std::vector<std::string>& opts,
                            const std::string& where) {
  if (opts.empty()) fail(where, "needs at least one option");
  for (const auto& o : opts) {
    if (o.empty()) fail(where, "empty option string");
  }
}

}  // namespace

TaskTemplate load_task_spec(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw TaskSpecError(std::string("task spec is not valid JSON: ") +
                        e.what());
  }
  if (!doc.is_object()) throw TaskSpecError("task spec: top level must be an object");

  TaskTemplate tpl;
  if (!doc.contains("name") || !doc["name"].is_string() ||
      doc["name"].get<std::string>().empty()) {
    fail("name", "missing or empty");
  }
  tpl.name = doc["name"].get<std::string>();

  if (!doc.contains("types")) fail("types", "missing");
  tpl.types = string_list(doc["types"], "types");
  if (tpl.types.size() < 2) fail("types", "need >=2 types");
  {
    std::set<std::string> seen(tpl.types.begin(), tpl.types.end());
    if (seen.size() != tpl.types.size()) fail("types", "duplicate type name");
  }

  if (!doc.contains("regions") || !doc["regions"].is_array() ||
      doc["regions"].empty()) {
    fail("regions", "missing or empty");
  }
  std::set<std::string> region_names;
  std::size_t n_label_regions = 0;
  for (std::size_t i = 0; i < doc["regions"].size(); ++i) {
    const json& r = doc["regions"][i];
    const std::string where = "regions[" + std::to_string(i) + "]";
    RegionSpec spec;
    if (!r.contains("name") || !r["name"].is_string() ||
        r["name"].get<std::string>().empty()) {
      fail(where + ".name", "missing or empty");
    }
    spec.name = r["name"].get<std::string>();
    if (!region_names.insert(spec.name).second) {
      fail(where + ".name", "duplicate region name '" + spec.name + "'");
    }
    if (!r.contains("kind") || !r["kind"].is_string()) {
      fail(where + ".kind", "missing");
    }
    const std::string kind = r["kind"].get<std::string>();
    if (kind == "constant") {
      spec.kind = RegionKind::Constant;
      if (!r.contains("text") || !r["text"].is_string() ||
          r["text"].get<std::string>().empty()) {
        fail(where + ".text", "constant region needs nonempty text");
      }
      spec.text = r["text"].get<std::string>();
    } else if (kind == "variable") {
      spec.kind = RegionKind::Variable;
      if (!r.contains("options")) fail(where + ".options", "missing");
      spec.options = string_list(r["options"], where + ".options");
      check_options_nonempty(spec.options, where + ".options");
    } else if (kind == "label_variable") {
      spec.kind = RegionKind::LabelVariable;
      ++n_label_regions;
      if (!r.contains("options") || !r["options"].is_object()) {
        fail(where + ".options", "label_variable needs per-type options");
      }
      for (const auto& [type, opts] : r["options"].items()) {
        if (std::find(tpl.types.begin(), tpl.types.end(), type) ==
            tpl.types.end()) {
          fail(where + ".options", "unknown type '" + type + "'");
        }
        spec.typed_options[type] =
            string_list(opts, where + ".options." + type);
        check_options_nonempty(spec.typed_options[type],
                               where + ".options." + type);
      }
      for (const auto& type : tpl.types) {
        if (!spec.typed_options.count(type)) {
          fail(where + ".options", "type '" + type + "' has no options");
        }
      }
    } else {
      fail(where + ".kind", "unknown kind '" + kind + "'");
    }
    tpl.regions.push_back(std::move(spec));
  }
  if (n_label_regions != 1) {
    fail("regions", "need exactly one label_variable region, got " +
                        std::to_string(n_label_regions));
  }

  if (!doc.contains("label_options") || !doc["label_options"].is_object()) {
    fail("label_options", "missing");
  }
  for (const auto& [type, opts] : doc["label_options"].items()) {
    if (std::find(tpl.types.begin(), tpl.types.end(), type) ==
        tpl.types.end()) {
      fail("label_options", "unknown type '" + type + "'");
    }
    tpl.label_options[type] = string_list(opts, "label_options." + type);
    check_options_nonempty(tpl.label_options[type], "label_options." + type);
  }
  for (const auto& type : tpl.types) {
    if (!tpl.label_options.count(type)) {
      fail("label_options", "type '" + type + "' has no label options");
    }
  }

  if (doc.contains("control_labels")) {
    auto cl = string_list(doc["control_labels"], "control_labels");
    if (cl.size() != 2) fail("control_labels", "need exactly two labels");
    tpl.control_labels = {cl[0], cl[1]};
  }
  if (tpl.control_labels[0].empty() || tpl.control_labels[1].empty() ||
      tpl.control_labels[0] == tpl.control_labels[1]) {
    fail("control_labels", "labels must be nonempty and distinct");
  }
  return tpl;
}

TaskTemplate load_task_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TaskSpecError("cannot open task spec file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return load_task_spec(ss.str());
}

EvalExample mirror(const EvalExample& e) {
  EvalExample m;
  m.base_text = e.source_text;
  m.source_text = e.base_text;
  m.base_label = e.source_label;
  m.source_label = e.base_label;
  m.base_regions = e.source_regions;
  m.source_regions = e.base_regions;
  m.base_type = e.source_type;
  m.source_type = e.base_type;
  return m;
}

EvalExample sample_pair(const TaskTemplate& tpl, Rng& rng) {
  const std::size_t i1 = rng.below(tpl.types.size());
  std::size_t i2 = rng.below(tpl.types.size() - 1);
  if (i2 >= i1) ++i2;
  const std::string& t1 = tpl.types[i1];
  const std::string& t2 = tpl.types[i2];

  EvalExample e;
  e.base_type = t1;
  e.source_type = t2;
  for (const auto& region : tpl.regions) {
    switch (region.kind) {
      case RegionKind::Constant:
        e.base_regions.push_back(region.text);
        e.source_regions.push_back(region.text);
        break;
      case RegionKind::Variable: {
        const std::string& shared =
            region.options[rng.below(region.options.size())];
        e.base_regions.push_back(shared);
        e.source_regions.push_back(shared);
        break;
      }
      case RegionKind::LabelVariable: {
        const auto& o1 = region.typed_options.at(t1);
        const auto& o2 = region.typed_options.at(t2);
        e.base_regions.push_back(o1[rng.below(o1.size())]);
        e.source_regions.push_back(o2[rng.below(o2.size())]);
        break;
      }
    }
  }
  const auto& l1 = tpl.label_options.at(t1);
  const auto& l2 = tpl.label_options.at(t2);
  e.base_label = l1[rng.below(l1.size())];
  e.source_label = l2[rng.below(l2.size())];
  e.base_text = join_regions(e.base_regions);
  e.source_text = join_regions(e.source_regions);
  return e;
}

Dataset build_dataset(const TaskTemplate& tpl, std::size_t n_train_pairs,
                      std::size_t n_eval_pairs, std::uint64_t seed) {
  if (n_train_pairs < 1 || n_eval_pairs < 1) {
    throw std::invalid_argument("build_dataset: pair counts must be >= 1");
  }
  Rng rng(seed);
  Dataset ds;
  ds.seed = seed;
  ds.train.reserve(2 * n_train_pairs);
  for (std::size_t i = 0; i < n_train_pairs; ++i) {
    EvalExample e = sample_pair(tpl, rng);
    ds.train.push_back(e);
    ds.train.push_back(mirror(e));
  }
  std::set<std::string> train_sentences;
  for (const auto& e : ds.train) train_sentences.insert(e.base_text);

  const std::size_t max_draws = 100 * n_eval_pairs;
  std::size_t draws = 0;
  ds.eval.reserve(2 * n_eval_pairs);
  while (ds.eval.size() < 2 * n_eval_pairs) {
    if (draws >= max_draws) {
      throw ExhaustionError(
          "template '" + tpl.name + "': could not sample " +
          std::to_string(n_eval_pairs) + " eval pairs disjoint from train (" +
          std::to_string(max_draws) + " draws exhausted)");
    }
    EvalExample e = sample_pair(tpl, rng);
    ++draws;
    if (train_sentences.count(e.base_text) ||
        train_sentences.count(e.source_text)) {
      continue;
    }
    ds.eval.push_back(e);
    ds.eval.push_back(mirror(e));
  }
  return ds;
}

Dataset apply_control_remap(Dataset dataset, const TaskTemplate& tpl) {
  auto remap = [&](EvalExample& e) {
    e.base_label = tpl.control_labels[tpl.type_class(e.base_type)];
    e.source_label = tpl.control_labels[tpl.type_class(e.source_type)];
  };
  for (auto& e : dataset.train) remap(e);
  for (auto& e : dataset.eval) remap(e);
  return dataset;
}

}  // namespace cbench
