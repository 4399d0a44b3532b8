#include "xmed/report.hpp"

#include <cstdio>
#include <fstream>

#include "xmed/error.hpp"

namespace xmed {
namespace {

nlohmann::ordered_json curve_json(const std::vector<CurvePoint>& points) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& [x, y] : points) arr.push_back({x, y});
  return arr;
}

std::vector<CurvePoint> curve_from(const nlohmann::json& arr) {
  std::vector<CurvePoint> out;
  for (const auto& p : arr) out.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  return out;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

nlohmann::ordered_json report_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["dataset"] = r.dataset;
  j["model"] = r.model;
  j["accuracy_pct"] = r.accuracy_pct;
  j["auc"] = r.auc ? nlohmann::ordered_json(*r.auc) : nlohmann::ordered_json(nullptr);
  j["f1"] = r.f1;
  j["avg_precision"] = r.avg_precision ? nlohmann::ordered_json(*r.avg_precision) : nlohmann::ordered_json(nullptr);
  j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}};
  j["roc"] = curve_json(r.roc);
  j["pr"] = curve_json(r.pr);
  j["threshold"] = r.threshold;
  return j;
}

void validate_report_json(const nlohmann::json& j) {
  auto need = [&](const char* key, auto check, const char* what) {
    if (!j.contains(key) || !check(j.at(key))) throw InputError(std::string("report field '") + key + "' must be " + what);
  };
  auto is_string = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_number = [](const nlohmann::json& v) { return v.is_number(); };
  auto in_range = [](double lo, double hi) {
    return [lo, hi](const nlohmann::json& v) { return v.is_number() && v.get<double>() >= lo && v.get<double>() <= hi; };
  };
  auto unit_or_null = [](const nlohmann::json& v) {
    return v.is_null() || (v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0);
  };
  auto is_curve = [](const nlohmann::json& v) {
    if (!v.is_array()) return false;
    for (const auto& p : v) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) return false;
    }
    return true;
  };
  need("dataset", is_string, "a string");
  need("model", is_string, "a string");
  need("accuracy_pct", in_range(0.0, 100.0), "a number in [0, 100]");
  need("auc", unit_or_null, "a number in [0, 1] or null");
  need("f1", in_range(0.0, 1.0), "a number in [0, 1]");
  need("avg_precision", unit_or_null, "a number in [0, 1] or null");
  need("threshold", is_number, "a number");
  need("roc", is_curve, "a list of [x, y] pairs");
  need("pr", is_curve, "a list of [x, y] pairs");
  need(
      "confusion",
      [](const nlohmann::json& v) {
        if (!v.is_object()) return false;
        for (const char* k : {"tp", "fp", "tn", "fn"}) {
          if (!v.contains(k) || !v.at(k).is_number_unsigned()) return false;
        }
        return true;
      },
      "an object of non-negative counts tp, fp, tn, fn");
}

MetricsReport report_from_json(const nlohmann::json& j) {
  validate_report_json(j);
  MetricsReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.accuracy_pct = j.at("accuracy_pct").get<double>();
  if (!j.at("auc").is_null()) r.auc = j.at("auc").get<double>();
  r.f1 = j.at("f1").get<double>();
  if (!j.at("avg_precision").is_null()) r.avg_precision = j.at("avg_precision").get<double>();
  const auto& cm = j.at("confusion");
  r.confusion = {cm.at("tp").get<std::size_t>(), cm.at("fp").get<std::size_t>(), cm.at("tn").get<std::size_t>(),
                 cm.at("fn").get<std::size_t>()};
  r.roc = curve_from(j.at("roc"));
  r.pr = curve_from(j.at("pr"));
  r.threshold = j.at("threshold").get<double>();
  return r;
}

void write_report(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << report_to_json(report).dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::string render_table_row(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? fixed(*v, 2) : std::string("n/a"); };
  return r.dataset + " | " + r.model + " | " + fixed(r.accuracy_pct, 1) + " | " + opt(r.auc) + " | " +
         fixed(r.f1, 2) + " | " + opt(r.avg_precision);
}

}  // namespace xmed
