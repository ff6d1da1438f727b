// extern "C" shim over the pipeline: opaque handles, status codes, and a
// thread-local error message.  Every entry point funnels through guard() so
// no exception can cross the ABI boundary.

#include "ula.h"

#include <charconv>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "common.hpp"
#include "eval.hpp"
#include "pipeline.hpp"

struct ula_config {
  ula::pipeline::RunConfig cfg;
};

namespace {

thread_local std::string tl_error;

const char* set_error(std::string msg) {
  tl_error = std::move(msg);
  return tl_error.c_str();
}

// Runs fn, translating exceptions into status codes + the thread-local
// message.  fn returning normally means ULA_OK.
template <typename Fn>
ula_status guard(Fn&& fn) {
  try {
    fn();
    tl_error.clear();
    return ULA_OK;
  } catch (const ula::UnderYieldError& e) {
    set_error(e.what());
    return ULA_ERR_UNDER_YIELD;
  } catch (const ula::NumericError& e) {
    set_error(e.what());
    return ULA_ERR_NUMERIC;
  } catch (const ula::IoError& e) {
    set_error(e.what());
    return ULA_ERR_IO;
  } catch (const ula::ConfigError& e) {
    set_error(e.what());
    return ULA_ERR_CONFIG;
  } catch (const ula::CompatError& e) {
    set_error(e.what());
    return ULA_ERR_CONFIG;
  } catch (const ula::LengthError& e) {
    set_error(e.what());
    return ULA_ERR_CONFIG;
  } catch (const std::exception& e) {
    set_error(e.what());
    return ULA_ERR_INTERNAL;
  } catch (...) {
    set_error("unknown failure");
    return ULA_ERR_INTERNAL;
  }
}

ula_status invalid(const char* msg) {
  set_error(msg);
  return ULA_ERR_INVALID;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::string report_json(const ula::pipeline::RunResult& r) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& st : r.stages) {
    arr.push_back({{"stage", st.name}, {"skipped", st.skipped}});
  }
  return arr.dump(2);
}

ula::eval::AblationAxis parse_axis(const char* kind, const char* const* values,
                                   size_t n_values) {
  std::vector<std::string> vals(values, values + n_values);
  const std::string k = kind;
  if (k == "coefficient") {
    std::vector<double> grid;
    for (const auto& v : vals) {
      double d = 0.0;
      const auto res = std::from_chars(v.data(), v.data() + v.size(), d);
      if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw ula::ConfigError("ablation: '" + v + "' is not a number");
      }
      grid.push_back(d);
    }
    return ula::eval::AblationAxis::coefficient(std::move(grid));
  }
  if (k == "distance_metric") {
    std::vector<ula::embed::DistanceMetric> grid;
    for (const auto& v : vals) grid.push_back(ula::embed::metric_from_name(v));
    return ula::eval::AblationAxis::distance_metric(std::move(grid));
  }
  if (k == "generation_mode") {
    std::vector<ula::psg::GenerationMode> grid;
    for (const auto& v : vals) grid.push_back(ula::psg::mode_from_name(v));
    return ula::eval::AblationAxis::generation_mode(std::move(grid));
  }
  throw ula::ConfigError(
      "ablation: unknown axis '" + k +
      "' (expected coefficient, distance_metric, or generation_mode)");
}

}  // namespace

extern "C" {

const char* ula_version(void) { return "0.1.0"; }

const char* ula_status_name(ula_status status) {
  switch (status) {
    case ULA_OK: return "ok";
    case ULA_ERR_CONFIG: return "config";
    case ULA_ERR_UNDER_YIELD: return "under_yield";
    case ULA_ERR_NUMERIC: return "numeric";
    case ULA_ERR_IO: return "io";
    case ULA_ERR_INVALID: return "invalid";
    case ULA_ERR_INTERNAL: return "internal";
  }
  return "internal";
}

const char* ula_last_error(void) { return tl_error.c_str(); }

void ula_string_free(char* s) { std::free(s); }

ula_status ula_config_load(const char* path, ula_config** out) {
  if (path == nullptr || out == nullptr) return invalid("null argument");
  *out = nullptr;
  return guard([&] {
    auto handle = std::make_unique<ula_config>();
    handle->cfg = ula::pipeline::RunConfig::from_file(path);
    *out = handle.release();
  });
}

ula_status ula_config_parse(const char* json_text, ula_config** out) {
  if (json_text == nullptr || out == nullptr) return invalid("null argument");
  *out = nullptr;
  return guard([&] {
    auto handle = std::make_unique<ula_config>();
    handle->cfg = ula::pipeline::RunConfig::from_json(json_text);
    *out = handle.release();
  });
}

void ula_config_free(ula_config* cfg) { delete cfg; }

ula_status ula_config_set_output_dir(ula_config* cfg, const char* dir) {
  if (cfg == nullptr || dir == nullptr) return invalid("null argument");
  return guard([&] {
    if (dir[0] == '\0') throw ula::ConfigError("output_dir: required");
    cfg->cfg.output_dir = dir;
  });
}

ula_status ula_config_override_seed(ula_config* cfg, uint64_t seed) {
  if (cfg == nullptr) return invalid("null argument");
  return guard([&] { cfg->cfg.override_seed(seed); });
}

ula_status ula_config_to_json(const ula_config* cfg, char** out_json) {
  if (cfg == nullptr || out_json == nullptr) return invalid("null argument");
  *out_json = nullptr;
  return guard([&] { *out_json = dup_string(cfg->cfg.to_json()); });
}

size_t ula_stage_count(void) { return ula::pipeline::stage_order().size(); }

const char* ula_stage_name(size_t i) {
  const auto& order = ula::pipeline::stage_order();
  if (i >= order.size()) return nullptr;
  return order[i].c_str();
}

ula_status ula_run_pipeline(const ula_config* cfg, int64_t threads,
                            char** out_report) {
  if (cfg == nullptr) return invalid("null argument");
  if (out_report != nullptr) *out_report = nullptr;
  return guard([&] {
    const auto result =
        ula::pipeline::run_pipeline(cfg->cfg, static_cast<int>(threads));
    if (out_report != nullptr) *out_report = dup_string(report_json(result));
  });
}

ula_status ula_run_stage(const ula_config* cfg, const char* stage,
                         int64_t threads, char** out_report) {
  if (cfg == nullptr || stage == nullptr) return invalid("null argument");
  if (out_report != nullptr) *out_report = nullptr;
  return guard([&] {
    const auto result =
        ula::pipeline::run_stage(cfg->cfg, stage, static_cast<int>(threads));
    if (out_report != nullptr) *out_report = dup_string(report_json(result));
  });
}

ula_status ula_run_ablation(const ula_config* cfg, const char* kind,
                            const char* const* values, size_t n_values,
                            int64_t threads, char** out_report) {
  if (cfg == nullptr || kind == nullptr) return invalid("null argument");
  if (values == nullptr && n_values > 0) return invalid("null argument");
  for (size_t i = 0; i < n_values; ++i) {
    if (values[i] == nullptr) return invalid("null argument");
  }
  if (out_report != nullptr) *out_report = nullptr;
  return guard([&] {
    const auto axis = parse_axis(kind, values, n_values);
    const auto report =
        ula::pipeline::run_ablation(cfg->cfg, axis, static_cast<int>(threads));
    if (out_report != nullptr) *out_report = dup_string(report.to_json());
  });
}

}  // extern "C"
