#include "esqa/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "esqa/error.hpp"
#include "esqa/rng.hpp"

namespace esqa {

namespace {

CategoryProcess process_from_string(const std::string& s) {
  if (s == "uniform") return CategoryProcess::uniform;
  if (s == "client_favorite") return CategoryProcess::client_favorite;
  if (s == "markov") return CategoryProcess::markov;
  if (s == "repeat") return CategoryProcess::repeat;
  throw ConfigError("rules.categorical: unknown process '" + s + "'");
}

std::string process_to_string(CategoryProcess p) {
  switch (p) {
    case CategoryProcess::uniform: return "uniform";
    case CategoryProcess::client_favorite: return "client_favorite";
    case CategoryProcess::markov: return "markov";
    case CategoryProcess::repeat: return "repeat";
  }
  return "?";
}

}  // namespace

void GeneratorConfig::validate() const {
  if (version != 1) throw ConfigError("generator: unsupported version " + std::to_string(version));
  schema.validate();
  if (clients == 0) throw ConfigError("generator: clients must be >= 1");
  if (min_events == 0 || min_events > max_events) {
    throw ConfigError("generator: need 1 <= min_events <= max_events");
  }
  if (!(mean_gap_seconds >= 1.0)) throw ConfigError("generator: mean_gap_seconds must be >= 1");
  for (const auto& f : schema.features) {
    if (f.kind == FeatureKind::categorical && f.categories.empty()) {
      throw ConfigError("generator: categorical feature '" + f.name + "' has zero categories");
    }
  }
  for (const auto& r : category_rules) {
    const auto& f = schema.features[schema.index_of(r.feature)];
    if (f.kind != FeatureKind::categorical) {
      throw ConfigError("generator: category rule on non-categorical feature '" + r.feature + "'");
    }
    if (r.favorite_weight < 0 || r.favorite_weight > 1 || r.successor_prob < 0 || r.successor_prob > 1) {
      throw ConfigError("generator: rule probabilities for '" + r.feature + "' must be in [0, 1]");
    }
  }
  for (const auto& r : numeric_rules) {
    const auto& f = schema.features[schema.index_of(r.feature)];
    if (f.kind != FeatureKind::real && f.kind != FeatureKind::integer) {
      throw ConfigError("generator: numeric rule on non-numeric feature '" + r.feature + "'");
    }
    if (!(r.log_sd >= 0)) throw ConfigError("generator: log_sd must be >= 0");
    if (!r.by_category.empty() &&
        schema.features[schema.index_of(r.by_category)].kind != FeatureKind::categorical) {
      throw ConfigError("generator: by_category must name a categorical feature");
    }
  }
  for (const auto& l : labels) {
    const auto& f = schema.features[schema.index_of(l.feature)];
    if (f.kind != FeatureKind::real && f.kind != FeatureKind::integer) {
      throw ConfigError("generator: label '" + l.name + "' needs a numeric feature");
    }
  }
}

nlohmann::ordered_json GeneratorConfig::to_json() const {
  nlohmann::ordered_json doc;
  doc["version"] = version;
  doc["clients"] = clients;
  doc["min_events"] = min_events;
  doc["max_events"] = max_events;
  doc["start_time"] = start_time;
  doc["mean_gap_seconds"] = mean_gap_seconds;
  doc["schema"] = schema.to_json();
  auto& cat = doc["rules"]["categorical"] = nlohmann::ordered_json::array();
  for (const auto& r : category_rules) {
    cat.push_back({{"feature", r.feature},
                   {"process", process_to_string(r.process)},
                   {"favorite_weight", r.favorite_weight},
                   {"successor_prob", r.successor_prob}});
  }
  auto& num = doc["rules"]["numeric"] = nlohmann::ordered_json::array();
  for (const auto& r : numeric_rules) {
    num.push_back({{"feature", r.feature},
                   {"log_mean", r.log_mean},
                   {"log_sd", r.log_sd},
                   {"by_category", r.by_category},
                   {"category_spread", r.category_spread}});
  }
  auto& lab = doc["rules"]["labels"] = nlohmann::ordered_json::array();
  for (const auto& l : labels) {
    lab.push_back({{"name", l.name}, {"feature", l.feature}, {"threshold", l.threshold}});
  }
  return doc;
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& doc) {
  GeneratorConfig c;
  try {
    if (!doc.contains("version")) throw ConfigError("generator: missing 'version'");
    c.version = doc.at("version").get<int>();
    c.schema = Schema::from_json(doc.at("schema"));
    c.clients = doc.value("clients", c.clients);
    c.min_events = doc.value("min_events", c.min_events);
    c.max_events = doc.value("max_events", c.max_events);
    c.start_time = doc.value("start_time", c.start_time);
    c.mean_gap_seconds = doc.value("mean_gap_seconds", c.mean_gap_seconds);
    if (doc.contains("rules")) {
      const auto& rules = doc.at("rules");
      for (const auto& j : rules.value("categorical", nlohmann::json::array())) {
        CategoryRule r;
        r.feature = j.at("feature").get<std::string>();
        r.process = process_from_string(j.value("process", std::string("uniform")));
        r.favorite_weight = j.value("favorite_weight", r.favorite_weight);
        r.successor_prob = j.value("successor_prob", r.successor_prob);
        c.category_rules.push_back(r);
      }
      for (const auto& j : rules.value("numeric", nlohmann::json::array())) {
        NumericRule r;
        r.feature = j.at("feature").get<std::string>();
        r.log_mean = j.value("log_mean", r.log_mean);
        r.log_sd = j.value("log_sd", r.log_sd);
        r.by_category = j.value("by_category", std::string());
        r.category_spread = j.value("category_spread", r.category_spread);
        c.numeric_rules.push_back(r);
      }
      for (const auto& j : rules.value("labels", nlohmann::json::array())) {
        LabelRule l;
        l.name = j.at("name").get<std::string>();
        l.feature = j.at("feature").get<std::string>();
        l.threshold = j.at("threshold").get<double>();
        c.labels.push_back(l);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  c.validate();
  return c;
}

bool evaluate_label(const LabelRule& rule, const EventSequence& sequence, const Schema& schema) {
  const std::size_t fi = schema.index_of(rule.feature);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& e : sequence.events) {
    if (auto x = as_number(e.values[fi])) {
      total += *x;
      ++n;
    }
  }
  return n > 0 && total / static_cast<double>(n) > rule.threshold;
}

SyntheticData generate_synthetic(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  const Schema& schema = config.schema;
  Rng rng(seed);
  SyntheticData out;
  out.dataset.schema = schema;

  // Realized rule parameters first, so they do not depend on client count.
  for (const auto& r : config.category_rules) {
    if (r.process != CategoryProcess::markov) continue;
    const std::size_t k = schema.features[schema.index_of(r.feature)].categories.size();
    std::vector<std::size_t> succ(k);
    for (std::size_t i = 0; i < k; ++i) succ[i] = i;
    rng.shuffle(succ);
    out.params.successors[r.feature] = succ;
  }
  for (const auto& r : config.numeric_rules) {
    if (r.by_category.empty()) continue;
    const std::size_t k = schema.features[schema.index_of(r.by_category)].categories.size();
    std::vector<double> means(k);
    for (auto& m : means) m = r.log_mean + r.category_spread * rng.normal();
    out.params.category_log_means[r.feature] = means;
  }

  const std::size_t nf = schema.features.size();
  const int width = static_cast<int>(std::to_string(config.clients).size());
  for (std::size_t c = 0; c < config.clients; ++c) {
    EventSequence seq;
    std::string num = std::to_string(c);
    seq.client_id = "c" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0') + num;
    const std::size_t len = config.min_events + rng.below(config.max_events - config.min_events + 1);

    std::map<std::string, std::size_t> favorite;
    for (const auto& r : config.category_rules) {
      const std::size_t k = schema.features[schema.index_of(r.feature)].categories.size();
      favorite[r.feature] = rng.below(k);
    }

    std::int64_t t = config.start_time + static_cast<std::int64_t>(rng.below(86400 * 7));
    std::map<std::string, std::size_t> previous;
    for (std::size_t i = 0; i < len; ++i) {
      Event e;
      if (i > 0) t += 1 + static_cast<std::int64_t>(rng.exponential(config.mean_gap_seconds));
      e.t = t;
      e.values.assign(nf, std::monostate{});
      for (std::size_t fi = 0; fi < nf; ++fi) {
        const auto& f = schema.features[fi];
        if (f.kind == FeatureKind::time_derived) e.values[fi] = derive_time_value(*f.derive, t);
      }
      std::map<std::string, std::size_t> drawn;
      for (const auto& r : config.category_rules) {
        const std::size_t fi = schema.index_of(r.feature);
        const std::size_t k = schema.features[fi].categories.size();
        std::size_t value = 0;
        switch (r.process) {
          case CategoryProcess::uniform:
            value = rng.below(k);
            break;
          case CategoryProcess::client_favorite:
            value = rng.uniform() < r.favorite_weight ? favorite[r.feature] : rng.below(k);
            break;
          case CategoryProcess::markov:
            if (i == 0) value = rng.below(k);
            else value = rng.uniform() < r.successor_prob ? out.params.successors[r.feature][previous[r.feature]]
                                                           : rng.below(k);
            break;
          case CategoryProcess::repeat:
            value = i == 0 ? favorite[r.feature] : previous[r.feature];
            break;
        }
        previous[r.feature] = value;
        drawn[r.feature] = value;
        e.values[fi] = schema.features[fi].categories[value];
      }
      for (const auto& r : config.numeric_rules) {
        const std::size_t fi = schema.index_of(r.feature);
        double mu = r.log_mean;
        if (!r.by_category.empty()) {
          const std::size_t ci = schema.index_of(r.by_category);
          std::size_t cat = 0;
          if (auto it = drawn.find(r.by_category); it != drawn.end()) {
            cat = it->second;
          } else {
            const auto& s = std::get<std::string>(e.values[ci]);
            const auto& cats = schema.features[ci].categories;
            cat = static_cast<std::size_t>(std::find(cats.begin(), cats.end(), s) - cats.begin());
          }
          mu = out.params.category_log_means[r.feature][cat];
        }
        const double x = std::exp(rng.normal(mu, r.log_sd));
        if (schema.features[fi].kind == FeatureKind::integer) {
          e.values[fi] = static_cast<std::int64_t>(std::llround(x));
        } else {
          e.values[fi] = std::round(x * 100.0) / 100.0;
        }
      }
      // Features without a rule get uniform categories / standard lognormal values.
      for (std::size_t fi = 0; fi < nf; ++fi) {
        const auto& f = schema.features[fi];
        if (!is_missing(e.values[fi])) continue;
        if (f.kind == FeatureKind::categorical) e.values[fi] = f.categories[rng.below(f.categories.size())];
        else if (f.kind == FeatureKind::integer) e.values[fi] = static_cast<std::int64_t>(rng.below(10));
        else if (f.kind == FeatureKind::real) e.values[fi] = std::round(std::exp(rng.normal()) * 100.0) / 100.0;
      }
      seq.events.push_back(std::move(e));
    }
    for (const auto& l : config.labels) seq.targets.emplace_back(l.name, evaluate_label(l, seq, schema));
    out.dataset.sequences.push_back(std::move(seq));
  }

  auto& prov = out.provenance;
  prov["version"] = 1;
  prov["seed"] = seed;
  prov["config"] = config.to_json();
  auto& params = prov["params"];
  params["successors"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : out.params.successors) params["successors"][k] = v;
  params["category_log_means"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : out.params.category_log_means) params["category_log_means"][k] = v;
  return out;
}

}  // namespace esqa
