#include "svil/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "svil/rng.hpp"
#include "svil/sjm.hpp"

namespace svil::exp {

namespace fs = std::filesystem;
using io::Json;

namespace {

// One JSON object of the config; tracks which keys were read so leftovers can
// be rejected by name.
class Section {
 public:
  Section(const Json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::size_t& out) {
    if (const Json* v = raw(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) throw ConfigError(field(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const std::string& key, int& out) {
    if (const Json* v = raw(key)) {
      if (!v->is_number_integer()) throw ConfigError(field(key), "expected an integer");
      out = v->get<int>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const Json* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const Json* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const Json* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    if (const Json* v = raw(key)) {
      if (!v->is_array()) throw ConfigError(field(key), "expected an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer() || e.get<long long>() < 0)
          throw ConfigError(field(key), "expected an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const Json* v = raw(key)) {
      if (!v->is_array()) throw ConfigError(field(key), "expected an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) throw ConfigError(field(key), "expected an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }

  void done() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

 private:
  const Json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

ExperimentKind parse_kind(const std::string& s) {
  if (s == "multi-source") return ExperimentKind::kMultiSource;
  if (s == "single-source-camera-split") return ExperimentKind::kCameraSplit;
  if (s == "fig1-style-replacement") return ExperimentKind::kFig1;
  throw ConfigError("kind", "expected multi-source, single-source-camera-split or fig1-style-replacement, got '" + s + "'");
}

sjm::WeightMode parse_weight_mode(const std::string& s, const std::string& field) {
  if (s == "soft") return sjm::WeightMode::kSoft;
  if (s == "hard") return sjm::WeightMode::kHard;
  throw ConfigError(field, "expected soft or hard, got '" + s + "'");
}

const char* weight_mode_name(sjm::WeightMode m) { return m == sjm::WeightMode::kSoft ? "soft" : "hard"; }

const char* scope_name(sjm::StyleUpdateScope s) { return s == sjm::StyleUpdateScope::kJittered ? "jittered" : "all"; }

void parse_dataset(const Json& doc, ExperimentConfig& c) {
  Section s(doc, "dataset");
  auto& d = c.dataset;
  s.get("source_domains", d.source_domains);
  s.get("with_target", d.with_target);
  s.get("identities_per_domain", d.identities_per_domain);
  s.get("images_per_identity", d.images_per_identity);
  s.get("cameras_per_domain", d.cameras_per_domain);
  s.get("channels", d.channels);
  s.get("height", d.height);
  s.get("width", d.width);
  s.get("mu_range", d.mu_range);
  s.get("sigma_ratio", d.sigma_ratio);
  s.get("noise", d.noise);
  s.get("camera_jitter", d.camera_jitter);
  s.get("pose_variation", d.pose_variation);
  if (const Json* styles = s.raw("styles")) {
    if (!styles->is_array()) throw ConfigError("dataset.styles", "expected an array");
    d.styles.clear();
    for (std::size_t i = 0; i < styles->size(); ++i) {
      Section st((*styles)[i], "dataset.styles[" + std::to_string(i) + "]");
      synth::DomainStyle style;
      style.domain_id = static_cast<int>(i);
      st.get("mu", style.mu);
      st.get("sigma", style.sigma);
      st.get("noise", style.noise);
      st.done();
      d.styles.push_back(std::move(style));
    }
  }
  s.done();
}

void parse_encoder(const Json& doc, ExperimentConfig& c) {
  Section s(doc, "encoder");
  auto& e = c.encoder;
  s.get("stage_channels", e.stage_channels);
  s.get("embedding_dim", e.embedding_dim);
  s.get("sjm_stage", e.sjm_stage);
  s.get("tau_init", e.tau_init);
  s.get("tau_min", e.tau_min);
  s.get("style_eps", e.style_eps);
  s.done();
}

void parse_train(const Json& doc, ExperimentConfig& c) {
  Section s(doc, "train");
  auto& t = c.train;
  auto& st = t.step;
  s.get("epochs", t.epochs);
  s.get("iterations_per_epoch", t.iterations_per_epoch);
  s.get("milestones", t.milestones);
  s.get("decay", t.decay);
  s.get("eval_every", t.eval_every);
  s.get("checkpoint_every", c.checkpoint_every);
  s.get("inner_lr", st.inner_lr);
  s.get("outer_lr", st.outer_lr);
  s.get("meta_test_weight", st.meta_test_weight);
  s.get("lambda", st.lambda);
  s.get("momentum", st.momentum);
  s.get("margin", st.margin);
  s.get("identities_per_batch", st.identities_per_domain);
  s.get("images_per_identity", st.images_per_identity);
  s.get("sjm", st.sjm);
  s.get("maml", st.maml);
  s.get("cross_domain", st.cross_domain);
  s.get("first_order", st.first_order);
  std::string mode = weight_mode_name(st.weight_mode);
  s.get("weight_mode", mode);
  st.weight_mode = parse_weight_mode(mode, "train.weight_mode");
  std::string scope = scope_name(st.style_update);
  s.get("style_update", scope);
  if (scope == "jittered") st.style_update = sjm::StyleUpdateScope::kJittered;
  else if (scope == "all") st.style_update = sjm::StyleUpdateScope::kAll;
  else throw ConfigError("train.style_update", "expected jittered or all, got '" + scope + "'");
  s.done();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

const char* kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kMultiSource: return "multi-source";
    case ExperimentKind::kCameraSplit: return "single-source-camera-split";
    case ExperimentKind::kFig1: return "fig1-style-replacement";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  try {
    dataset.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("dataset", e.what());
  }
  if (encoder.input_channels != dataset.channels) throw ConfigError("encoder", "input channels must equal dataset.channels");
  try {
    encoder.validate(dataset.pixels());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("encoder", e.what());
  }
  try {
    train.step.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", e.what());
  }
  if (train.epochs == 0) throw ConfigError("train.epochs", "must be positive");
  if (!(train.decay > 0.0 && train.decay <= 1.0)) throw ConfigError("train.decay", "must lie in (0, 1]");
  if (!dataset.with_target) throw ConfigError("dataset.with_target", "a held-out target domain is required");

  std::size_t train_domains = dataset.source_domains;
  std::size_t ids = dataset.identities_per_domain;
  if (kind == ExperimentKind::kCameraSplit) {
    if (camera_source_domain < 0 || static_cast<std::size_t>(camera_source_domain) >= dataset.source_domains)
      throw ConfigError("camera_split.source_domain", "must name a source domain");
    if (camera_subsets == 0) throw ConfigError("camera_split.subsets", "must be positive");
    if (camera_subsets > dataset.cameras_per_domain)
      throw ConfigError("camera_split.subsets", "exceeds dataset.cameras_per_domain");
    train_domains = camera_subsets;
  }
  if (train.step.maml && train_domains < 2)
    throw ConfigError("train.maml", "needs at least two training domains");
  if (train.step.identities_per_domain > ids)
    throw ConfigError("train.identities_per_batch", "exceeds dataset.identities_per_domain");
}

ExperimentConfig parse_config(const Json& doc) {
  Section root(doc, "");
  ExperimentConfig c;
  std::string kind = kind_name(c.kind);
  root.get("kind", kind);
  c.kind = parse_kind(kind);
  std::size_t seed = c.seed;
  root.get("seed", seed);
  c.seed = seed;
  std::string out = c.output_dir.string();
  root.get("output_dir", out);
  if (out.empty()) throw ConfigError("output_dir", "must not be empty");
  c.output_dir = out;
  root.get("export_embeddings", c.export_embeddings);

  const Json* dataset = root.raw("dataset");
  if (!dataset) throw ConfigError("dataset", "missing dataset specification");
  parse_dataset(*dataset, c);
  c.dataset.seed = c.seed;
  if (const Json* e = root.raw("encoder")) parse_encoder(*e, c);
  c.encoder.input_channels = c.dataset.channels;
  if (const Json* t = root.raw("train")) parse_train(*t, c);
  if (const Json* cs = root.raw("camera_split")) {
    Section s(*cs, "camera_split");
    s.get("source_domain", c.camera_source_domain);
    s.get("subsets", c.camera_subsets);
    s.done();
  }
  root.done();
  c.train.seed = c.seed;
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("<file>", std::string("not valid JSON: ") + e.what());
  }
  return parse_config(doc);
}

Json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  Json styles = Json::array();
  for (const auto& s : d.styles) styles.push_back({{"mu", s.mu}, {"sigma", s.sigma}, {"noise", s.noise}});
  Json dataset{{"source_domains", d.source_domains},
               {"with_target", d.with_target},
               {"identities_per_domain", d.identities_per_domain},
               {"images_per_identity", d.images_per_identity},
               {"cameras_per_domain", d.cameras_per_domain},
               {"channels", d.channels},
               {"height", d.height},
               {"width", d.width},
               {"mu_range", d.mu_range},
               {"sigma_ratio", d.sigma_ratio},
               {"noise", d.noise},
               {"camera_jitter", d.camera_jitter},
               {"pose_variation", d.pose_variation}};
  if (!d.styles.empty()) dataset["styles"] = styles;
  const auto& e = c.encoder;
  Json encoder{{"stage_channels", e.stage_channels}, {"embedding_dim", e.embedding_dim},
               {"sjm_stage", e.sjm_stage},           {"tau_init", e.tau_init},
               {"tau_min", e.tau_min},               {"style_eps", e.style_eps}};
  const auto& t = c.train;
  const auto& st = t.step;
  Json train{{"epochs", t.epochs},
             {"iterations_per_epoch", t.iterations_per_epoch},
             {"milestones", t.milestones},
             {"decay", t.decay},
             {"eval_every", t.eval_every},
             {"checkpoint_every", c.checkpoint_every},
             {"inner_lr", st.inner_lr},
             {"outer_lr", st.outer_lr},
             {"meta_test_weight", st.meta_test_weight},
             {"lambda", st.lambda},
             {"momentum", st.momentum},
             {"margin", st.margin},
             {"identities_per_batch", st.identities_per_domain},
             {"images_per_identity", st.images_per_identity},
             {"sjm", st.sjm},
             {"maml", st.maml},
             {"cross_domain", st.cross_domain},
             {"first_order", st.first_order},
             {"weight_mode", weight_mode_name(st.weight_mode)},
             {"style_update", scope_name(st.style_update)}};
  return Json{{"kind", kind_name(c.kind)},
              {"seed", c.seed},
              {"output_dir", c.output_dir.string()},
              {"export_embeddings", c.export_embeddings},
              {"dataset", dataset},
              {"encoder", encoder},
              {"train", train},
              {"camera_split", {{"source_domain", c.camera_source_domain}, {"subsets", c.camera_subsets}}}};
}

std::string config_hash(const ExperimentConfig& config) {
  Json doc = to_json(config);
  doc.erase("output_dir");
  return hex64(fnv1a64(doc.dump()));
}

void apply_environment(ExperimentConfig& config) {
  if (const char* dir = std::getenv("SVIL_OUTPUT_DIR"); dir && *dir) config.output_dir = dir;
  if (const char* seed = std::getenv("SVIL_SEED"); seed && *seed) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(seed, &end, 10);
    if (*end != '\0' || seed[0] == '-') throw ConfigError("SVIL_SEED", "expected a non-negative integer");
    config.seed = v;
    config.dataset.seed = v;
    config.train.seed = v;
  }
}

Prepared prepare(const ExperimentConfig& config) {
  Prepared p;
  synth::DatasetSpec spec = config.dataset;
  spec.seed = config.seed;
  p.data = synth::generate_dataset(spec);
  std::vector<std::vector<synth::Sample>> domains;
  if (config.kind == ExperimentKind::kCameraSplit) {
    const auto source = p.data.domain_samples(config.camera_source_domain);
    domains = synth::camera_split(source, config.camera_subsets, CounterRng(config.seed, fnv1a64("camera_split")));
  } else {
    for (std::size_t d = 0; d < spec.source_domains; ++d) domains.push_back(p.data.domain_samples(static_cast<int>(d)));
  }
  p.sources = train::make_source_set(std::move(domains));
  p.target_samples = p.data.target_samples();
  p.target = eval::query_gallery_split(p.target_samples);
  return p;
}

Prepared stylize_sources(const Prepared& prepared) {
  const auto target = prepared.data.target_domain();
  if (!target) throw std::invalid_argument("stylize_sources: dataset has no target domain");
  const auto& style = prepared.data.styles.at(static_cast<std::size_t>(*target));
  Prepared out = prepared;
  for (auto& d : out.sources.domains) d = synth::stylize_images(d, style);
  return out;
}

Tensor embedding_gap(const model::EncoderConfig& encoder, const model::ModelParams& params, const Prepared& prepared) {
  std::vector<Tensor> sets;
  for (const auto& d : prepared.sources.domains) sets.push_back(model::normalize_rows(model::extract_features(encoder, params, d)));
  sets.push_back(model::normalize_rows(model::extract_features(encoder, params, prepared.target_samples)));
  return eval::domain_gap(sets);
}

RunOutcome run_prepared(const ExperimentConfig& config, const Prepared& prepared, const std::optional<fs::path>& out_dir) {
  train::TrainConfig tc = config.train;
  tc.seed = config.seed;

  std::ofstream metrics;
  train::Observer observer;
  if (out_dir) {
    fs::create_directories(*out_dir / "checkpoints");
    metrics.open(*out_dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write " + (*out_dir / "metrics.jsonl").string());
    observer.on_iteration = [&](const train::IterationRecord& r) { metrics << to_json(r).dump() << '\n'; };
    observer.on_epoch = [&](const train::EpochRecord& r) { metrics << to_json(r).dump() << '\n'; };
    if (config.checkpoint_every > 0) {
      observer.on_epoch_params = [&](std::size_t epoch, const model::ModelParams& p) {
        if (epoch % config.checkpoint_every == 0)
          model::save_checkpoint(*out_dir / "checkpoints" / ("epoch" + std::to_string(epoch)), config.encoder, p);
      };
    }
  }

  RunOutcome out;
  out.result = train::run_training(tc, config.encoder, prepared.sources, &prepared.target, out_dir ? &observer : nullptr);
  out.final_eval = eval::evaluate_model(config.encoder, out.result.params, prepared.target);
  out.domain_gap = embedding_gap(config.encoder, out.result.params, prepared);
  out.mean_gap = eval::mean_off_diagonal(out.domain_gap);

  if (out_dir) {
    metrics.close();
    Json doc = to_json(out.final_eval);
    doc["domain_gap"] = tensor_to_json(out.domain_gap);
    doc["mean_domain_gap"] = out.mean_gap;
    io::write_json(*out_dir / "final_eval.json", doc);
    model::save_checkpoint(*out_dir / "checkpoints" / "final", config.encoder, out.result.params);
    if (config.train.step.sjm) {
      const auto& m = out.result.memories;
      sjm::save_memories(*out_dir / "checkpoints" / "memories", m.style, m.similarity, m.distance);
    }
    if (config.export_embeddings) {
      const auto all = prepared.data.samples;
      eval::export_embeddings(*out_dir / "embeddings", model::extract_features(config.encoder, out.result.params, all), all);
    }
  }
  return out;
}

namespace {

const char* kSummaryHeader = "run\tmAP\trank1\trank5\trank10\tmean_domain_gap\texcluded_queries\n";

std::string summary_row(const std::string& label, const RunOutcome& o) {
  const auto& e = o.final_eval;
  return label + "\t" + fmt(e.mAP) + "\t" + fmt(e.rank(1)) + "\t" + fmt(e.rank(5)) + "\t" + fmt(e.rank(10)) + "\t" +
         fmt(o.mean_gap) + "\t" + std::to_string(e.excluded_queries) + "\n";
}

Json summary_json(const std::string& label, const RunOutcome& o) {
  return {{"run", label},
          {"mAP", o.final_eval.mAP},
          {"rank1", o.final_eval.rank(1)},
          {"rank5", o.final_eval.rank(5)},
          {"rank10", o.final_eval.rank(10)},
          {"mean_domain_gap", o.mean_gap}};
}

}  // namespace

void write_stamp(const fs::path& dir, const ExperimentConfig& config) {
  io::write_json(dir / "stamp.json", {{"config_hash", config_hash(config)},
                                      {"seed", config.seed},
                                      {"kind", kind_name(config.kind)},
                                      {"version", kVersion},
                                      {"json_library", "nlohmann/json"}});
}

Json run_experiment(const ExperimentConfig& config) {
  const fs::path dir = config.output_dir;
  fs::create_directories(dir);
  io::write_json(dir / "config.json", to_json(config));
  write_stamp(dir, config);

  const Prepared prepared = prepare(config);
  Json summary;
  std::string table = kSummaryHeader;
  if (config.kind == ExperimentKind::kFig1) {
    const RunOutcome original = run_prepared(config, prepared, dir / "original");
    const RunOutcome stylized = run_prepared(config, stylize_sources(prepared), dir / "stylized");
    table += summary_row("original", original) + summary_row("stylized", stylized);
    summary = {{"kind", kind_name(config.kind)},
               {"original", summary_json("original", original)},
               {"stylized", summary_json("stylized", stylized)},
               {"mAP_delta", stylized.final_eval.mAP - original.final_eval.mAP},
               {"stylized_better", stylized.final_eval.mAP > original.final_eval.mAP}};
    io::write_json(dir / "comparison.json", summary);
  } else {
    const RunOutcome o = run_prepared(config, prepared, dir);
    table += summary_row("main", o);
    summary = summary_json("main", o);
    summary["kind"] = kind_name(config.kind);
  }
  write_text(dir / "summary.tsv", table);
  return summary;
}

Toggle parse_toggle(const std::string& text, const ExperimentConfig& base) {
  Toggle t;
  const auto eq = text.find('=');
  t.name = text.substr(0, eq);
  static const std::map<std::string, std::vector<std::string>> kDefaults = {
      {"sjm", {"off", "on"}},          {"maml", {"off", "on"}},          {"cross_domain", {"off", "on"}},
      {"loss", {"spec", "all"}},       {"weight_mode", {"soft", "hard"}}, {"sjm_stage", {}}};
  auto it = kDefaults.find(t.name);
  if (it == kDefaults.end()) throw ConfigError("toggles", "unknown toggle '" + t.name + "'");
  if (eq == std::string::npos) {
    t.values = it->second;
    if (t.name == "sjm_stage")
      for (std::size_t s = 0; s < base.encoder.num_stages(); ++s) t.values.push_back(std::to_string(s));
  } else {
    std::stringstream ss(text.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) t.values.push_back(v);
    if (t.values.empty()) throw ConfigError("toggles", "toggle '" + t.name + "' has no values");
    ExperimentConfig probe = base;
    for (const auto& value : t.values) apply_toggle(probe, t.name, value);
  }
  return t;
}

void apply_toggle(ExperimentConfig& c, const std::string& name, const std::string& value) {
  auto on_off = [&](bool& flag) {
    if (value == "on") flag = true;
    else if (value == "off") flag = false;
    else throw ConfigError("toggles", name + " expects on or off, got '" + value + "'");
  };
  auto& st = c.train.step;
  if (name == "sjm") on_off(st.sjm);
  else if (name == "maml") on_off(st.maml);
  else if (name == "cross_domain") on_off(st.cross_domain);
  else if (name == "weight_mode") st.weight_mode = parse_weight_mode(value, "toggles");
  else if (name == "loss") {
    if (value == "spec") st.lambda = 0.0;
    else if (value == "all") st.lambda = losses::kDefaultLambda;
    else throw ConfigError("toggles", "loss expects spec or all, got '" + value + "'");
  } else if (name == "sjm_stage") {
    std::size_t pos = 0;
    std::size_t stage = 0;
    try {
      stage = std::stoul(value, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != value.size() || value.empty()) throw ConfigError("toggles", "sjm_stage expects a stage index");
    c.encoder.sjm_stage = stage;
  } else {
    throw ConfigError("toggles", "unknown toggle '" + name + "'");
  }
}

std::vector<AblationRun> ablate(const ExperimentConfig& base, const std::vector<Toggle>& toggles, bool write_artifacts) {
  if (base.kind == ExperimentKind::kFig1) throw ConfigError("kind", "ablations need a multi-source or camera-split config");
  std::vector<std::vector<std::pair<std::string, std::string>>> combos{{}};
  for (const auto& t : toggles) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& c : combos)
      for (const auto& v : t.values) {
        auto e = c;
        e.emplace_back(t.name, v);
        next.push_back(std::move(e));
      }
    combos = std::move(next);
  }

  std::vector<ExperimentConfig> configs;
  for (const auto& combo : combos) {
    ExperimentConfig c = base;
    for (const auto& [name, value] : combo) apply_toggle(c, name, value);
    c.validate();
    configs.push_back(std::move(c));
  }

  const fs::path dir = base.output_dir;
  if (write_artifacts) {
    fs::create_directories(dir);
    io::write_json(dir / "config.json", to_json(base));
    write_stamp(dir, base);
  }
  const Prepared prepared = prepare(base);
  std::vector<AblationRun> runs;
  std::string table = "";
  for (const auto& t : toggles) table += t.name + "\t";
  table += kSummaryHeader;
  Json records = Json::array();
  for (std::size_t i = 0; i < combos.size(); ++i) {
    AblationRun run;
    run.settings = combos[i];
    for (const auto& [name, value] : combos[i]) run.label += (run.label.empty() ? "" : "_") + name + "-" + value;
    if (run.label.empty()) run.label = "base";
    std::optional<fs::path> out;
    if (write_artifacts) out = dir / run.label;
    run.outcome = run_prepared(configs[i], prepared, out);
    for (const auto& kv : combos[i]) table += kv.second + "\t";
    table += summary_row(run.label, run.outcome);
    Json rec = summary_json(run.label, run.outcome);
    for (const auto& [name, value] : combos[i]) rec["settings"][name] = value;
    records.push_back(rec);
    runs.push_back(std::move(run));
  }
  if (write_artifacts) {
    write_text(dir / "summary.tsv", table);
    io::write_json(dir / "ablation.json", records);
  }
  return runs;
}

Json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Json to_json(const eval::EvalResult& r) {
  Json doc{{"mAP", r.mAP},
           {"cmc", r.cmc},
           {"per_query_ap", r.per_query_ap},
           {"evaluated_queries", r.evaluated_queries},
           {"excluded_queries", r.excluded_queries}};
  for (std::size_t k : {1, 5, 10})
    if (k <= r.cmc.size()) doc["rank" + std::to_string(k)] = r.rank(k);
  return doc;
}

eval::EvalResult eval_from_json(const Json& doc) {
  eval::EvalResult r;
  r.mAP = doc.at("mAP").get<double>();
  r.cmc = doc.at("cmc").get<std::vector<double>>();
  r.per_query_ap = doc.at("per_query_ap").get<std::vector<double>>();
  r.evaluated_queries = doc.at("evaluated_queries").get<std::vector<std::size_t>>();
  r.excluded_queries = doc.at("excluded_queries").get<std::size_t>();
  return r;
}

Json to_json(const losses::LossBreakdown& l) {
  return {{"agnostic_ce", l.agnostic_ce}, {"agnostic_triplet", l.agnostic_triplet},
          {"specific_ce", l.specific_ce}, {"specific_triplet", l.specific_triplet},
          {"agnostic", l.agnostic},       {"specific", l.specific},
          {"total", l.total},             {"lambda", l.lambda}};
}

losses::LossBreakdown losses_from_json(const Json& doc) {
  losses::LossBreakdown l;
  l.agnostic_ce = doc.at("agnostic_ce");
  l.agnostic_triplet = doc.at("agnostic_triplet");
  l.specific_ce = doc.at("specific_ce").get<std::vector<double>>();
  l.specific_triplet = doc.at("specific_triplet").get<std::vector<double>>();
  l.agnostic = doc.at("agnostic");
  l.specific = doc.at("specific");
  l.total = doc.at("total");
  l.lambda = doc.at("lambda");
  return l;
}

Json to_json(const train::IterationRecord& r) {
  return {{"type", "iteration"},
          {"iteration", r.iteration},
          {"epoch", r.epoch},
          {"meta_train_domains", r.split.train},
          {"meta_test_domain", r.split.test},
          {"lr_scale", r.lr_scale},
          {"losses", to_json(r.meta_train)},
          {"meta_test_loss", r.meta_test_loss ? Json(*r.meta_test_loss) : Json(nullptr)},
          {"temperature", r.temperature},
          {"memory_norms", {{"style", r.style_norm}, {"similarity", r.similarity_norm}, {"distance", r.distance_norm}}}};
}

train::IterationRecord iteration_from_json(const Json& doc) {
  if (doc.at("type") != "iteration") throw std::invalid_argument("iteration_from_json: wrong record type");
  train::IterationRecord r;
  r.iteration = doc.at("iteration");
  r.epoch = doc.at("epoch");
  r.split.train = doc.at("meta_train_domains").get<std::vector<int>>();
  r.split.test = doc.at("meta_test_domain");
  r.lr_scale = doc.at("lr_scale");
  r.meta_train = losses_from_json(doc.at("losses"));
  if (!doc.at("meta_test_loss").is_null()) r.meta_test_loss = doc.at("meta_test_loss").get<double>();
  r.temperature = doc.at("temperature");
  const auto& n = doc.at("memory_norms");
  r.style_norm = n.at("style");
  r.similarity_norm = n.at("similarity");
  r.distance_norm = n.at("distance");
  return r;
}

Json to_json(const train::EpochRecord& r) {
  return {{"type", "epoch"},
          {"epoch", r.epoch},
          {"mean_total_loss", r.mean_total_loss},
          {"target", r.target ? to_json(*r.target) : Json(nullptr)}};
}

train::EpochRecord epoch_from_json(const Json& doc) {
  if (doc.at("type") != "epoch") throw std::invalid_argument("epoch_from_json: wrong record type");
  train::EpochRecord r;
  r.epoch = doc.at("epoch");
  r.mean_total_loss = doc.at("mean_total_loss");
  if (!doc.at("target").is_null()) r.target = eval_from_json(doc.at("target"));
  return r;
}

eval::EvalResult evaluate_checkpoint(const fs::path& checkpoint, const fs::path& dataset) {
  model::EncoderConfig encoder;
  const auto params = model::load_checkpoint(checkpoint, &encoder);
  const auto data = synth::load_dataset(dataset);
  const auto samples = data.target_domain() ? data.target_samples() : data.samples;
  return eval::evaluate_model(encoder, params, eval::query_gallery_split(samples));
}

}  // namespace svil::exp
