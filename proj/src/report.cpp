#include "remedi/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace remedi {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string csv_header_comment(const ReportMeta& meta) {
  std::ostringstream os;
  os << "# config_hash=" << meta.config_hash << " seed=" << meta.seed << "\n";
  return os.str();
}

void check_aggregate(const char* name, double stored, double recomputed) {
  if (std::abs(stored - recomputed) > 1e-9)
    throw std::logic_error(std::string("report aggregate '") + name + "' (" + fmt(stored) +
                           ") disagrees with its per-sample rows (" + fmt(recomputed) + ")");
}

template <typename Getter>
double row_mean(const std::vector<SampleRow>& rows, Getter getter) {
  double total = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    auto v = getter(r);
    if (v) {
      total += *v;
      ++n;
    }
  }
  return n ? total / n : 0.0;
}

}  // namespace

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

// --- edit report -----------------------------------------------------------------

nlohmann::json edit_report_json(const EditReport& report, const ReportMeta& meta) {
  check_aggregate("efficacy", report.efficacy, row_mean(report.rows, [](const SampleRow& r) { return r.efficacy; }));
  check_aggregate("neighborhood", report.neighborhood,
                  row_mean(report.rows, [](const SampleRow& r) { return r.neighborhood; }));
  check_aggregate("consistency", report.consistency,
                  row_mean(report.rows, [](const SampleRow& r) { return r.consistency; }));
  check_aggregate("fluency", report.fluency, row_mean(report.rows, [](const SampleRow& r) { return r.fluency; }));
  check_aggregate("essence", report.essence, row_mean(report.rows, [](const SampleRow& r) { return r.essence; }));

  json j;
  j["config_hash"] = meta.config_hash;
  j["seed"] = meta.seed;
  j["method"] = report.method;
  j["task"] = report.task;
  j["aggregates"] = {{"efficacy", report.efficacy},
                     {"neighborhood", report.neighborhood},
                     {"consistency", report.consistency},
                     {"fluency", report.fluency},
                     {"essence", report.essence}};
  json rows = json::array();
  for (const auto& r : report.rows) {
    json jr;
    jr["id"] = r.id;
    if (r.efficacy) jr["efficacy"] = *r.efficacy;
    if (r.neighborhood) jr["neighborhood"] = *r.neighborhood;
    if (r.consistency) jr["consistency"] = *r.consistency;
    if (r.fluency) jr["fluency"] = *r.fluency;
    if (r.essence) jr["essence"] = *r.essence;
    jr["attribute_seen"] = r.attribute_seen;
    jr["model_knows"] = r.model_knows;
    rows.push_back(jr);
  }
  j["rows"] = rows;
  // breakdowns by training exposure and prior knowledge
  EditReport tmp = report;
  json breakdowns = json::object();
  for (const char* key : {"attribute_seen", "model_knows"}) {
    json groups = json::array();
    for (const auto& g : breakdown(tmp, key)) {
      json jg;
      jg["value"] = g.key_value;
      jg["n"] = g.n;
      for (const auto& [k, v] : g.means) jg[k] = v;
      groups.push_back(jg);
    }
    breakdowns[key] = groups;
  }
  j["breakdowns"] = breakdowns;
  j["warnings"] = report.warnings;
  return j;
}

void write_edit_report(const EditReport& report, const ReportMeta& meta,
                       const std::string& json_path, const std::string& csv_path) {
  write_text_file(json_path, edit_report_json(report, meta).dump(1) + "\n");
  std::ostringstream csv;
  csv << csv_header_comment(meta);
  csv << "id,efficacy,neighborhood,consistency,fluency,essence,attribute_seen,model_knows\n";
  auto cell = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& r : report.rows) {
    csv << r.id << "," << cell(r.efficacy) << "," << cell(r.neighborhood) << "," << cell(r.consistency)
        << "," << cell(r.fluency) << "," << cell(r.essence) << "," << (r.attribute_seen ? 1 : 0) << ","
        << (r.model_knows ? 1 : 0) << "\n";
  }
  write_text_file(csv_path, csv.str());
}

// --- probe report -----------------------------------------------------------------

nlohmann::json probe_report_json(const ProbeReport& report, const ReportMeta& meta) {
  ProbeReport check = score_predictions(report.predicted, report.actual);
  if (check.tp != report.tp || check.fp != report.fp || check.tn != report.tn || check.fn != report.fn)
    throw std::logic_error("probe report confusion counts disagree with its predictions");
  json j;
  j["config_hash"] = meta.config_hash;
  j["seed"] = meta.seed;
  j["method"] = report.method;
  j["condition"] = report.condition;
  j["entity_layer"] = report.entity_layer;
  j["control"] = report.control;
  j["confusion"] = {{"tp", report.tp}, {"fp", report.fp}, {"tn", report.tn}, {"fn", report.fn}};
  j["f1"] = report.f1;
  j["phi"] = report.phi;
  return j;
}

void write_probe_reports(const std::vector<ProbeReport>& reports, const ReportMeta& meta,
                         const std::string& json_path, const std::string& csv_path) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(probe_report_json(r, meta));
  json j;
  j["config_hash"] = meta.config_hash;
  j["seed"] = meta.seed;
  j["reports"] = arr;
  write_text_file(json_path, j.dump(1) + "\n");

  std::ostringstream csv;
  csv << csv_header_comment(meta);
  csv << "method,condition,entity_layer,tp,fp,tn,fn,f1,phi,control\n";
  for (const auto& r : reports) {
    csv << r.method << "," << r.condition << "," << r.entity_layer << "," << r.tp << "," << r.fp << ","
        << r.tn << "," << r.fn << "," << fmt(r.f1) << "," << fmt(r.phi) << "," << (r.control ? 1 : 0)
        << "\n";
  }
  write_text_file(csv_path, csv.str());
}

// --- concept report -----------------------------------------------------------------

nlohmann::json concept_report_json(const ConceptEditReport& report, const ReportMeta& meta) {
  auto stats = [](const ConceptClassStats& s) {
    return json{{"mean_delta", s.mean_delta}, {"sd_delta", s.sd_delta}, {"r", s.r}, {"n", s.n}};
  };
  json j;
  j["config_hash"] = meta.config_hash;
  j["seed"] = meta.seed;
  j["method"] = report.method;
  j["correlated"] = stats(report.correlated);
  j["original"] = stats(report.original);
  j["random"] = stats(report.random);
  return j;
}

void write_concept_report(const ConceptEditReport& report, const ReportMeta& meta,
                          const std::string& json_path, const std::string& csv_path,
                          const std::string& svg_path) {
  write_text_file(json_path, concept_report_json(report, meta).dump(1) + "\n");
  std::ostringstream csv;
  csv << csv_header_comment(meta);
  csv << "sample_id,mean_delta_correlated,mean_delta_random\n";
  for (size_t i = 0; i < report.sample_ids.size(); ++i)
    csv << report.sample_ids[i] << "," << fmt(report.sample_delta_correlated[i]) << ","
        << fmt(report.sample_delta_random[i]) << "\n";
  write_text_file(csv_path, csv.str());

  std::vector<std::tuple<double, double, std::string>> pts;
  for (size_t i = 0; i < report.sample_ids.size(); ++i) {
    pts.emplace_back(report.sample_delta_random[i], report.sample_delta_correlated[i], "");
  }
  write_text_file(svg_path, svg_scatter("per-sample delta p (x100): random vs correlated", pts,
                                        "random", "correlated", meta));
}

void write_occupation_reports(const std::vector<OccupationReport>& reports, const ReportMeta& meta,
                              const std::string& json_path, const std::string& csv_path) {
  json arr = json::array();
  for (const auto& r : reports)
    arr.push_back({{"method", r.method},
                   {"in_context", r.in_context},
                   {"accuracy", r.accuracy},
                   {"fluency", r.fluency},
                   {"n", r.n}});
  json j;
  j["config_hash"] = meta.config_hash;
  j["seed"] = meta.seed;
  j["reports"] = arr;
  write_text_file(json_path, j.dump(1) + "\n");

  std::ostringstream csv;
  csv << csv_header_comment(meta);
  csv << "method,in_context,accuracy,fluency,n\n";
  for (const auto& r : reports)
    csv << r.method << "," << (r.in_context ? 1 : 0) << "," << fmt(r.accuracy) << "," << fmt(r.fluency)
        << "," << r.n << "\n";
  write_text_file(csv_path, csv.str());
}

void write_sweep_result(const LayerSweepResult& sweep, const ReportMeta& meta,
                        const std::string& csv_path, const std::string& svg_path) {
  std::set<std::string> names;
  for (const auto& m : sweep.metrics)
    for (const auto& [k, v] : m) names.insert(k);

  std::ostringstream csv;
  csv << csv_header_comment(meta);
  csv << "layer";
  for (const auto& n : names) csv << "," << n;
  csv << ",harmonic_mean,selected\n";
  for (size_t i = 0; i < sweep.layers.size(); ++i) {
    csv << sweep.layers[i];
    for (const auto& n : names) {
      auto it = sweep.metrics[i].find(n);
      csv << "," << (it != sweep.metrics[i].end() ? fmt(it->second) : std::string());
    }
    csv << "," << fmt(sweep.harmonic_mean[i]) << "," << (sweep.layers[i] == sweep.selected_layer ? 1 : 0)
        << "\n";
  }
  write_text_file(csv_path, csv.str());

  std::vector<double> xs(sweep.layers.begin(), sweep.layers.end());
  write_text_file(svg_path, svg_line_chart("harmonic mean of " + sweep.task + " metrics by layer", xs,
                                           {{"harmonic_mean", sweep.harmonic_mean}}, meta));
}

void write_norm_profile(const NormProfile& profile, const ReportMeta& meta,
                        const std::string& csv_path, const std::string& svg_path) {
  std::ostringstream csv;
  csv << csv_header_comment(meta);
  csv << "layer,pre_norm,post_norm,ratio\n";
  for (size_t l = 0; l < profile.pre_norm.size(); ++l)
    csv << l << "," << fmt(profile.pre_norm[l]) << "," << fmt(profile.post_norm[l]) << ","
        << fmt(profile.ratio[l]) << "\n";
  write_text_file(csv_path, csv.str());

  std::vector<double> xs;
  for (size_t l = 0; l < profile.pre_norm.size(); ++l) xs.push_back(static_cast<double>(l));
  write_text_file(svg_path,
                  svg_line_chart("entity representation norm by layer", xs,
                                 {{"pre_edit", profile.pre_norm}, {"post_edit", profile.post_norm}}, meta));
}

// --- SVG -----------------------------------------------------------------------------

namespace {

constexpr int kW = 640, kH = 400, kPad = 56;
const char* kColors[] = {"#2266cc", "#cc3322", "#22aa55", "#aa22aa", "#888822"};

struct Range {
  double lo = 0.0, hi = 1.0;
  void update(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  static Range of(const std::vector<double>& vs) {
    Range r{vs.empty() ? 0.0 : vs[0], vs.empty() ? 1.0 : vs[0]};
    for (double v : vs) r.update(v);
    if (r.hi == r.lo) r.hi = r.lo + 1.0;
    return r;
  }
  double px(double v, int lo_px, int hi_px) const {
    return lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px);
  }
};

std::string svg_open(const std::string& title, const ReportMeta& meta) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  os << "<!-- config_hash=" << meta.config_hash << " seed=" << meta.seed << " -->\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
     << "</text>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad / 2 << "\" y2=\""
     << kH - kPad << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kPad << "\" y2=\"" << kPad / 2
     << "\" stroke=\"black\"/>\n";
  return os.str();
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::vector<double>& xs,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series,
                           const ReportMeta& meta) {
  std::ostringstream os;
  os << svg_open(title, meta);
  Range xr = Range::of(xs);
  std::vector<double> all;
  for (const auto& [name, ys] : series) all.insert(all.end(), ys.begin(), ys.end());
  Range yr = Range::of(all);
  int ci = 0;
  for (const auto& [name, ys] : series) {
    const char* color = kColors[ci % 5];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < xs.size() && i < ys.size(); ++i) {
      os << fmt(xr.px(xs[i], kPad, kW - kPad / 2)) << ","
         << fmt(kH - kPad - (yr.px(ys[i], 0, kH - kPad - kPad / 2))) << " ";
    }
    os << "\"/>\n";
    os << "<text x=\"" << kW - kPad / 2 - 120 << "\" y=\"" << 40 + 16 * ci << "\" font-size=\"12\" fill=\""
       << color << "\">" << name << "</text>\n";
    ++ci;
  }
  for (size_t i = 0; i < xs.size(); ++i) {
    os << "<text x=\"" << fmt(xr.px(xs[i], kPad, kW - kPad / 2)) << "\" y=\"" << kH - kPad + 16
       << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(xs[i]) << "</text>\n";
  }
  os << "<text x=\"" << kPad - 8 << "\" y=\"" << kPad / 2 + 8 << "\" text-anchor=\"end\" font-size=\"10\">"
     << fmt(yr.hi) << "</text>\n";
  os << "<text x=\"" << kPad - 8 << "\" y=\"" << kH - kPad << "\" text-anchor=\"end\" font-size=\"10\">"
     << fmt(yr.lo) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string svg_scatter(const std::string& title,
                        const std::vector<std::tuple<double, double, std::string>>& points,
                        const std::string& x_label, const std::string& y_label,
                        const ReportMeta& meta) {
  std::ostringstream os;
  os << svg_open(title, meta);
  std::vector<double> xs, ys;
  for (const auto& [x, y, lbl] : points) {
    xs.push_back(x);
    ys.push_back(y);
  }
  Range xr = Range::of(xs), yr = Range::of(ys);
  for (const auto& [x, y, lbl] : points) {
    os << "<circle cx=\"" << fmt(xr.px(x, kPad, kW - kPad / 2)) << "\" cy=\""
       << fmt(kH - kPad - yr.px(y, 0, kH - kPad - kPad / 2)) << "\" r=\"2.5\" fill=\"#2266cc\" fill-opacity=\"0.5\"/>\n";
    if (!lbl.empty())
      os << "<text x=\"" << fmt(xr.px(x, kPad, kW - kPad / 2) + 4) << "\" y=\""
         << fmt(kH - kPad - yr.px(y, 0, kH - kPad - kPad / 2)) << "\" font-size=\"9\">" << lbl << "</text>\n";
  }
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << x_label << "</text>\n";
  os << "<text x=\"14\" y=\"" << kH / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << kH / 2
     << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

// --- schema validation ------------------------------------------------------------------

namespace {

bool type_matches(const json& doc, const std::string& type) {
  if (type == "object") return doc.is_object();
  if (type == "array") return doc.is_array();
  if (type == "string") return doc.is_string();
  if (type == "number") return doc.is_number();
  if (type == "integer") return doc.is_number_integer() || doc.is_number_unsigned();
  if (type == "boolean") return doc.is_boolean();
  if (type == "null") return doc.is_null();
  return false;
}

bool validate_node(const json& doc, const json& schema, std::string path, std::string* error) {
  if (schema.contains("type")) {
    const json& t = schema.at("type");
    bool ok = false;
    if (t.is_string()) {
      ok = type_matches(doc, t.get<std::string>());
    } else if (t.is_array()) {
      for (const auto& opt : t) ok = ok || type_matches(doc, opt.get<std::string>());
    }
    if (!ok) {
      if (error) *error = path + ": type mismatch";
      return false;
    }
  }
  if (schema.contains("required")) {
    for (const auto& req : schema.at("required")) {
      if (!doc.contains(req.get<std::string>())) {
        if (error) *error = path + ": missing required field " + req.get<std::string>();
        return false;
      }
    }
  }
  if (schema.contains("properties") && doc.is_object()) {
    for (const auto& [key, sub] : schema.at("properties").items()) {
      if (doc.contains(key) && !validate_node(doc.at(key), sub, path + "/" + key, error)) return false;
    }
  }
  if (schema.contains("items") && doc.is_array()) {
    int i = 0;
    for (const auto& el : doc) {
      if (!validate_node(el, schema.at("items"), path + "[" + std::to_string(i) + "]", error)) return false;
      ++i;
    }
  }
  return true;
}

}  // namespace

bool validate_schema(const nlohmann::json& doc, const nlohmann::json& schema, std::string* error) {
  return validate_node(doc, schema, "$", error);
}

}  // namespace remedi
