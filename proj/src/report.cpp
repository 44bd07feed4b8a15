#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "rrtl/harness.hpp"

namespace fs = std::filesystem;

namespace rrtl::harness {

namespace {

std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string num_g(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// Small deterministic SVG canvas; everything renders with fixed precision.
class Svg {
public:
    Svg(double w, double h) : w_(w), h_(h) {}

    void line(double x1, double y1, double x2, double y2, const char* color = "#444",
              double width = 1.0) {
        body_ << "<line x1='" << num(x1) << "' y1='" << num(y1) << "' x2='" << num(x2) << "' y2='"
              << num(y2) << "' stroke='" << color << "' stroke-width='" << num(width) << "'/>\n";
    }

    void circle(double cx, double cy, double r, const char* fill, const char* stroke = "none") {
        body_ << "<circle cx='" << num(cx) << "' cy='" << num(cy) << "' r='" << num(r)
              << "' fill='" << fill << "' stroke='" << stroke << "'/>\n";
    }

    void polygon(const std::vector<std::pair<double, double>>& pts, const char* fill,
                 double opacity) {
        body_ << "<polygon points='";
        for (const auto& [x, y] : pts) body_ << num(x) << ',' << num(y) << ' ';
        body_ << "' fill='" << fill << "' fill-opacity='" << num(opacity) << "' stroke='#333'"
              << " stroke-width='0.5'/>\n";
    }

    void polyline(const std::vector<std::pair<double, double>>& pts, const char* color,
                  double width = 1.5, const char* dash = nullptr) {
        body_ << "<polyline points='";
        for (const auto& [x, y] : pts) body_ << num(x) << ',' << num(y) << ' ';
        body_ << "' fill='none' stroke='" << color << "' stroke-width='" << num(width) << "'";
        if (dash) body_ << " stroke-dasharray='" << dash << "'";
        body_ << "/>\n";
    }

    void text(double x, double y, const std::string& s, int size = 11,
              const char* anchor = "middle") {
        body_ << "<text x='" << num(x) << "' y='" << num(y) << "' font-size='" << size
              << "' font-family='sans-serif' text-anchor='" << anchor << "'>" << s << "</text>\n";
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write figure '" + path + "'");
        out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << num(w_) << "' height='"
            << num(h_) << "' viewBox='0 0 " << num(w_) << ' ' << num(h_) << "'>\n"
            << "<rect width='100%' height='100%' fill='white'/>\n"
            << body_.str() << "</svg>\n";
    }

private:
    double w_, h_;
    std::ostringstream body_;
};

struct Axis {
    double lo = 0.0, hi = 1.0;    // data range
    double p0 = 0.0, p1 = 1.0;    // pixel range

    double map(double v) const { return p0 + (v - lo) / (hi - lo + 1e-300) * (p1 - p0); }
};

std::vector<double> kde(const std::vector<double>& xs, const std::vector<double>& grid) {
    const double sd = vec_sd_sample(xs);
    double bw = 0.9 * sd * std::pow(static_cast<double>(xs.size()), -0.2);
    if (!(bw > 1e-6)) bw = 1e-2;
    std::vector<double> dens(grid.size(), 0.0);
    for (size_t g = 0; g < grid.size(); ++g) {
        for (double x : xs) {
            const double z = (grid[g] - x) / bw;
            dens[g] += std::exp(-0.5 * z * z);
        }
        dens[g] /= static_cast<double>(xs.size()) * bw * 2.5066282746310005;
    }
    return dens;
}

std::string available_coordinates(const std::vector<RunRecord>& records) {
    std::set<std::string> coords;
    for (const auto& r : records) {
        coords.insert(datagen::to_string(r.cell.shift_type) + std::string("/") +
                      to_string(r.cell.relation) + "/nt" + std::to_string(r.cell.n_target) + "/" +
                      r.model + "/" + r.scenario + (r.failed ? " (failed)" : ""));
    }
    std::string out;
    for (const auto& c : coords) out += "\n  " + c;
    return out.empty() ? "\n  (store is empty)" : out;
}

void report_violin(const std::vector<RunRecord>& records, const std::string& out_dir) {
    // transfer vs target-only R^2 distributions per (model, relation)
    struct Group {
        std::vector<double> transfer, baseline;
    };
    std::map<std::pair<std::string, std::string>, Group> groups;
    for (const auto& r : records) {
        if (r.failed) continue;
        auto& g = groups[{r.model, to_string(r.cell.relation)}];
        if (r.scenario == "transfer") g.transfer.push_back(r.metrics.r2);
        if (r.scenario == "target_baseline") g.baseline.push_back(r.metrics.r2);
    }
    for (auto it = groups.begin(); it != groups.end();) {
        if (it->second.transfer.empty() || it->second.baseline.empty()) {
            it = groups.erase(it);
        } else {
            ++it;
        }
    }
    if (groups.empty()) {
        throw DiagnosticError("violin report: no (transfer, target_baseline) pairs in store; "
                              "available records:" +
                              available_coordinates(records));
    }

    const double panel_w = 170.0, h = 320.0, margin = 42.0;
    Svg svg(margin + panel_w * groups.size() + 20.0, h);

    double lo = 1e300, hi = -1e300;
    for (const auto& [key, g] : groups) {
        for (double v : g.transfer) { lo = std::min(lo, v); hi = std::max(hi, v); }
        for (double v : g.baseline) { lo = std::min(lo, v); hi = std::max(hi, v); }
    }
    const double pad = 0.08 * (hi - lo + 1e-9);
    Axis y{lo - pad, hi + pad, h - 48.0, 26.0};

    std::ofstream tsv(out_dir + "/violin.tsv");
    tsv << "model\trelation\tscenario\tr2\n";

    svg.line(margin, y.p1, margin, y.p0);
    for (int t = 0; t <= 4; ++t) {
        const double v = y.lo + (y.hi - y.lo) * t / 4.0;
        svg.line(margin - 4, y.map(v), margin, y.map(v));
        svg.text(margin - 7, y.map(v) + 4, num_g(v), 10, "end");
    }
    svg.text(12, h / 2, "R2", 11, "middle");

    size_t gi = 0;
    for (const auto& [key, g] : groups) {
        const double cx = margin + panel_w * (gi + 0.5);
        auto draw_violin = [&](const std::vector<double>& xs, double center, const char* fill,
                               bool filled_marker) {
            double dlo = *std::min_element(xs.begin(), xs.end());
            double dhi = *std::max_element(xs.begin(), xs.end());
            if (dhi - dlo < 1e-9) { dlo -= 1e-3; dhi += 1e-3; }
            std::vector<double> grid(41), dens;
            for (int i = 0; i < 41; ++i) grid[i] = dlo + (dhi - dlo) * i / 40.0;
            dens = kde(xs, grid);
            const double dmax = *std::max_element(dens.begin(), dens.end()) + 1e-300;
            std::vector<std::pair<double, double>> pts;
            for (int i = 0; i < 41; ++i) {
                pts.push_back({center - dens[i] / dmax * 28.0, y.map(grid[i])});
            }
            for (int i = 40; i >= 0; --i) {
                pts.push_back({center + dens[i] / dmax * 28.0, y.map(grid[i])});
            }
            svg.polygon(pts, fill, 0.45);
            const double mean = vec_mean(xs);
            svg.circle(center, y.map(mean), 4.0, filled_marker ? "#1f4e79" : "white", "#1f4e79");
        };
        draw_violin(g.transfer, cx - 34.0, "#4b8bbe", true);
        draw_violin(g.baseline, cx + 34.0, "#e0a868", false);
        const double diff = vec_mean(g.transfer) - vec_mean(g.baseline);
        svg.line(cx - 34.0, y.map(vec_mean(g.transfer)), cx + 34.0, y.map(vec_mean(g.baseline)),
                 "#333", 1.0);
        svg.text(cx, 18, key.first + " / " + key.second, 11);
        svg.text(cx, h - 30, (diff >= 0 ? "+" : "") + num_g(diff), 11);
        svg.text(cx - 34.0, h - 16, "transfer", 10);
        svg.text(cx + 34.0, h - 16, "target-only", 10);
        for (double v : g.transfer) tsv << key.first << '\t' << key.second << "\ttransfer\t" << num_g(v) << '\n';
        for (double v : g.baseline) tsv << key.first << '\t' << key.second << "\ttarget_baseline\t" << num_g(v) << '\n';
        ++gi;
    }
    svg.save(out_dir + "/violin.svg");
}

void report_shift_curve(const std::vector<RunRecord>& records, const std::string& out_dir) {
    struct Pt {
        double x, y;
        std::string model;
    };
    std::map<std::string, std::vector<Pt>> panels;  // by shift type
    for (const auto& r : records) {
        if (r.failed || r.scenario != "transfer") continue;
        if (r.cell.shift_type == datagen::ShiftType::none) continue;
        double x = r.cell.intensity;
        if (r.cell.shift_type == datagen::ShiftType::covariate) x = r.drift.feature_shift;
        if (r.cell.shift_type == datagen::ShiftType::label) x = r.drift.label_shift;
        panels[datagen::to_string(r.cell.shift_type)].push_back({x, r.metrics.r2, r.model});
    }
    if (panels.empty()) {
        throw DiagnosticError("shift_curve report: no shifted transfer records; available:" +
                              available_coordinates(records));
    }

    const double panel_w = 250.0, h = 300.0, margin = 46.0;
    Svg svg(margin + panels.size() * panel_w + 16.0, h);
    std::ofstream tsv(out_dir + "/shift_curve.tsv");
    tsv << "shift_type\tmodel\tscore\tr2\n";

    std::set<std::string> model_names;
    for (const auto& [type, pts] : panels) {
        for (const auto& p : pts) model_names.insert(p.model);
    }
    const std::vector<const char*> colors = {"#4b8bbe", "#d1495b", "#2e933c", "#9b5de5"};

    size_t pi = 0;
    for (const auto& [type, pts] : panels) {
        double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
        for (const auto& p : pts) {
            xlo = std::min(xlo, p.x); xhi = std::max(xhi, p.x);
            ylo = std::min(ylo, p.y); yhi = std::max(yhi, p.y);
        }
        if (xhi - xlo < 1e-12) xhi = xlo + 1.0;
        const double ypad = 0.1 * (yhi - ylo + 1e-9);
        Axis ax{xlo, xhi, margin + pi * panel_w + 8.0, margin + pi * panel_w + panel_w - 20.0};
        Axis ay{ylo - ypad, yhi + ypad, h - 44.0, 26.0};

        svg.line(ax.p0, ay.p0, ax.p1, ay.p0);
        svg.line(ax.p0, ay.p0, ax.p0, ay.p1);
        svg.text((ax.p0 + ax.p1) / 2, 16, type + " shift", 11);
        svg.text((ax.p0 + ax.p1) / 2, h - 8,
                 type == "conditional" ? "intensity" : (type == "label" ? "LabelShift" : "FeatureShift"),
                 10);

        int mi = 0;
        for (const auto& model : model_names) {
            std::vector<double> xs, ys;
            for (const auto& p : pts) {
                if (p.model != model) continue;
                xs.push_back(p.x);
                ys.push_back(p.y);
                svg.circle(ax.map(p.x), ay.map(p.y), 2.4, colors[mi % colors.size()]);
                tsv << type << '\t' << model << '\t' << num_g(p.x) << '\t' << num_g(p.y) << '\n';
            }
            if (xs.size() >= 2) {
                const double mx = vec_mean(xs), my = vec_mean(ys);
                double sxx = 0.0, sxy = 0.0;
                for (size_t i = 0; i < xs.size(); ++i) {
                    sxx += (xs[i] - mx) * (xs[i] - mx);
                    sxy += (xs[i] - mx) * (ys[i] - my);
                }
                const double slope = sxx > 0 ? sxy / sxx : 0.0;
                svg.polyline({{ax.map(xlo), ay.map(my + slope * (xlo - mx))},
                              {ax.map(xhi), ay.map(my + slope * (xhi - mx))}},
                             colors[mi % colors.size()], 1.5);
            }
            ++mi;
        }
        ++pi;
    }
    int mi = 0;
    for (const auto& model : model_names) {
        svg.text(margin + 70.0 * mi + 30.0, h - 24, model, 10, "start");
        svg.circle(margin + 70.0 * mi + 22.0, h - 28, 3.0, colors[mi % colors.size()]);
        ++mi;
    }
    svg.save(out_dir + "/shift_curve.svg");
}

void report_sample_curve(const std::vector<RunRecord>& records, const std::string& out_dir) {
    const auto agg = aggregate(records);
    struct Series {
        std::map<size_t, std::pair<double, double>> by_nt;  // mean, se
    };
    std::map<std::string, std::map<std::pair<std::string, std::string>, Series>> panels;
    for (const auto& row : agg.rows) {
        if (row.key.scenario != "transfer" && row.key.scenario != "target_baseline") continue;
        panels[row.key.relation][{row.key.model, row.key.scenario}].by_nt[row.key.n_target] = {
            row.r2_mean, row.r2_se};
    }
    if (panels.empty()) {
        throw DiagnosticError("sample_curve report: no aggregable records; available:" +
                              available_coordinates(records));
    }

    std::set<size_t> nts;
    for (const auto& [rel, series] : panels) {
        for (const auto& [key, s] : series) {
            for (const auto& [nt, v] : s.by_nt) nts.insert(nt);
        }
    }
    std::vector<size_t> nt_list(nts.begin(), nts.end());

    const double panel_w = 240.0, h = 300.0, margin = 46.0;
    Svg svg(margin + panels.size() * panel_w + 16.0, h);
    std::ofstream tsv(out_dir + "/sample_curve.tsv");
    tsv << "relation\tmodel\tscenario\tn_target\tr2_mean\tr2_se\n";

    double ylo = 1e300, yhi = -1e300;
    for (const auto& [rel, series] : panels) {
        for (const auto& [key, s] : series) {
            for (const auto& [nt, v] : s.by_nt) {
                ylo = std::min(ylo, v.first - v.second);
                yhi = std::max(yhi, v.first + v.second);
            }
        }
    }
    const double ypad = 0.1 * (yhi - ylo + 1e-9);
    Axis ay{ylo - ypad, yhi + ypad, h - 44.0, 26.0};

    const std::vector<const char*> colors = {"#4b8bbe", "#d1495b", "#2e933c", "#9b5de5"};
    size_t pi = 0;
    for (const auto& [rel, series] : panels) {
        Axis ax{0.0, static_cast<double>(nt_list.size() - 1) + 1e-9,
                margin + pi * panel_w + 12.0, margin + pi * panel_w + panel_w - 24.0};
        svg.line(ax.p0, ay.p0, ax.p1, ay.p0);
        svg.line(ax.p0, ay.p0, ax.p0, ay.p1);
        svg.text((ax.p0 + ax.p1) / 2, 16, rel, 11);
        for (size_t i = 0; i < nt_list.size(); ++i) {
            svg.text(ax.map(static_cast<double>(i)), h - 30, std::to_string(nt_list[i]), 10);
        }
        svg.text((ax.p0 + ax.p1) / 2, h - 8, "target sample size", 10);

        int si = 0;
        for (const auto& [key, s] : series) {
            const bool baseline = key.second == "target_baseline";
            std::vector<std::pair<double, double>> pts;
            for (size_t i = 0; i < nt_list.size(); ++i) {
                const auto it = s.by_nt.find(nt_list[i]);
                if (it == s.by_nt.end()) continue;
                const double px = ax.map(static_cast<double>(i));
                const double py = ay.map(it->second.first);
                pts.push_back({px, py});
                svg.line(px, ay.map(it->second.first - it->second.second), px,
                         ay.map(it->second.first + it->second.second),
                         colors[si % colors.size()], 1.0);
                svg.circle(px, py, 3.0, baseline ? "white" : colors[si % colors.size()],
                           colors[si % colors.size()]);
                tsv << rel << '\t' << key.first << '\t' << key.second << '\t' << nt_list[i] << '\t'
                    << num_g(it->second.first) << '\t' << num_g(it->second.second) << '\n';
            }
            svg.polyline(pts, colors[si % colors.size()], 1.2, baseline ? "4,3" : nullptr);
            ++si;
        }
        ++pi;
    }
    svg.save(out_dir + "/sample_curve.svg");
}

void report_density(const std::vector<RunRecord>& records, const std::string& out_dir) {
    // mean stored portfolio density vs the empirical eval histogram, for the
    // preferred scenario with densities available
    std::vector<const RunRecord*> sel;
    for (const char* scenario : {"transfer", "target_baseline", "zero_shot"}) {
        for (const auto& r : records) {
            if (!r.failed && !r.density.empty() && r.scenario == scenario) sel.push_back(&r);
        }
        if (!sel.empty()) break;
    }
    if (sel.empty()) {
        throw DiagnosticError("density report: no records carry portfolio densities; available:" +
                              available_coordinates(records));
    }

    const size_t n_pts = sel.front()->density.size();
    std::vector<double> mean_density(n_pts, 0.0);
    std::vector<double> hist(30, 0.0);
    double hist_total = 0.0;
    for (const auto* r : sel) {
        for (size_t i = 0; i < n_pts && i < r->density.size(); ++i) {
            mean_density[i] += r->density[i] / static_cast<double>(sel.size());
        }
        for (size_t b = 0; b < 30 && b < r->eval_histogram.size(); ++b) {
            hist[b] += r->eval_histogram[b];
            hist_total += r->eval_histogram[b];
        }
    }
    for (auto& v : hist) v = v / (hist_total + 1e-300) * 30.0;  // density scale

    const double w = 520.0, h = 340.0, margin = 50.0;
    Svg svg(w, h);
    double ymax = 0.0;
    for (double v : mean_density) ymax = std::max(ymax, v);
    for (double v : hist) ymax = std::max(ymax, v);
    Axis ax{0.0, 1.0, margin, w - 20.0};
    Axis ay{0.0, ymax * 1.08 + 1e-9, h - 44.0, 24.0};

    for (size_t b = 0; b < 30; ++b) {
        const double x0 = ax.map(b / 30.0), x1 = ax.map((b + 1) / 30.0);
        svg.polygon({{x0, ay.map(0.0)}, {x0, ay.map(hist[b])}, {x1, ay.map(hist[b])},
                     {x1, ay.map(0.0)}},
                    "#cfcfcf", 0.8);
    }
    std::vector<std::pair<double, double>> pts;
    for (size_t i = 0; i < n_pts; ++i) {
        pts.push_back({ax.map(static_cast<double>(i) / static_cast<double>(n_pts - 1)),
                       ay.map(mean_density[i])});
    }
    svg.polyline(pts, "#1f4e79", 2.0);
    svg.line(ax.p0, ay.p0, ax.p1, ay.p0);
    svg.line(ax.p0, ay.p0, ax.p0, ay.p1);
    svg.text(w / 2, 16, "portfolio density vs empirical recovery histogram", 12);
    svg.text(w / 2, h - 10, "recovery rate", 10);
    svg.save(out_dir + "/density.svg");

    std::ofstream tsv(out_dir + "/density.tsv");
    tsv << "r\tdensity\tempirical\n";
    for (size_t i = 0; i < n_pts; ++i) {
        const double r = static_cast<double>(i) / static_cast<double>(n_pts - 1);
        const size_t b = std::min<size_t>(static_cast<size_t>(r * 30.0), 29);
        tsv << num_g(r) << '\t' << num_g(mean_density[i]) << '\t' << num_g(hist[b]) << '\n';
    }
}

}  // namespace

void report(const std::string& store_dir, ReportKind kind, const std::string& out_dir) {
    const auto records = load_records(store_dir);
    fs::create_directories(out_dir);
    switch (kind) {
        case ReportKind::violin: report_violin(records, out_dir); break;
        case ReportKind::shift_curve: report_shift_curve(records, out_dir); break;
        case ReportKind::sample_curve: report_sample_curve(records, out_dir); break;
        case ReportKind::density: report_density(records, out_dir); break;
    }
}

}  // namespace rrtl::harness
