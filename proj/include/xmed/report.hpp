#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "xmed/metrics.hpp"

namespace xmed {

/// {"dataset", "model", "accuracy_pct", "auc", "f1", "avg_precision",
///  "confusion": {"tp","fp","tn","fn"}, "roc": [[fpr,tpr]...],
///  "pr": [[recall,precision]...], "threshold"}; undefined metrics are null.
nlohmann::ordered_json report_to_json(const MetricsReport& report);

MetricsReport report_from_json(const nlohmann::json& j);

/// Throws InputError naming the first missing or mistyped field.
void validate_report_json(const nlohmann::json& j);

void write_report(const MetricsReport& report, const std::filesystem::path& path);

/// "dataset | model | accuracy (1 dp) | AUC | F1 | AP (2 dp)"; undefined
/// values print as "n/a".
std::string render_table_row(const MetricsReport& report);

}  // namespace xmed
