#include "tbench/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tbench/errors.hpp"

namespace fs = std::filesystem;

namespace tbench {

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

void PlotRegistry::claim(const std::string& id) {
    if (std::find(written_.begin(), written_.end(), id) != written_.end())
        throw ConfigError("plot id written twice: " + id);
    written_.push_back(id);
    fs::create_directories(out_dir_);
}

void PlotRegistry::line_chart(const std::string& id, const std::string& title,
                              const std::string& x_label, const std::string& y_label,
                              const std::vector<double>& x,
                              const std::map<std::string, std::vector<double>>& series) {
    claim(id);
    std::ofstream csv(out_dir_ + "/" + id + ".csv");
    csv << x_label;
    for (const auto& [name, _] : series) csv << "," << name;
    csv << "\n";
    for (size_t i = 0; i < x.size(); ++i) {
        csv << fmt(x[i]);
        for (const auto& [_, ys] : series) csv << "," << fmt(ys[i]);
        csv << "\n";
    }

    const int w = 640, h = 420, ml = 60, mr = 150, mt = 40, mb = 50;
    double xmin = x.empty() ? 0 : *std::min_element(x.begin(), x.end());
    double xmax = x.empty() ? 1 : *std::max_element(x.begin(), x.end());
    double ymin = 1e300, ymax = -1e300;
    for (const auto& [_, ys] : series)
        for (double v : ys) {
            ymin = std::min(ymin, v);
            ymax = std::max(ymax, v);
        }
    if (ymin > ymax) { ymin = 0; ymax = 1; }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto sx = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto sy = [&](double v) { return h - mb - (v - ymin) / (ymax - ymin) * (h - mt - mb); };

    std::ofstream svg(out_dir_ + "/" + id + ".svg");
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>"
        << xml_escape(title) << "</text>\n";
    svg << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    svg << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 12
        << "' text-anchor='middle' font-size='11'>" << xml_escape(x_label) << "</text>\n";
    svg << "<text x='14' y='" << (mt + h - mb) / 2 << "' font-size='11' transform='rotate(-90 14 "
        << (mt + h - mb) / 2 << ")' text-anchor='middle'>" << xml_escape(y_label) << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        double vy = ymin + (ymax - ymin) * t / 4.0;
        svg << "<text x='" << ml - 6 << "' y='" << sy(vy) + 4
            << "' text-anchor='end' font-size='10'>" << fmt(vy).substr(0, 5) << "</text>\n";
        double vx = xmin + (xmax - xmin) * t / 4.0;
        svg << "<text x='" << sx(vx) << "' y='" << h - mb + 16
            << "' text-anchor='middle' font-size='10'>" << fmt(vx).substr(0, 6) << "</text>\n";
    }
    int ci = 0;
    for (const auto& [name, ys] : series) {
        const char* color = kPalette[ci % 10];
        svg << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        for (size_t i = 0; i < x.size(); ++i) svg << sx(x[i]) << "," << sy(ys[i]) << " ";
        svg << "'/>\n";
        svg << "<text x='" << w - mr + 10 << "' y='" << mt + 14 * ci + 10 << "' fill='" << color
            << "' font-size='11'>" << xml_escape(name) << "</text>\n";
        ++ci;
    }
    svg << "</svg>\n";
}

void PlotRegistry::bar_chart(const std::string& id, const std::string& title,
                             const std::vector<std::string>& labels,
                             const std::vector<double>& values) {
    claim(id);
    std::ofstream csv(out_dir_ + "/" + id + ".csv");
    csv << "label,value\n";
    for (size_t i = 0; i < labels.size(); ++i) csv << labels[i] << "," << fmt(values[i]) << "\n";

    const int w = 640, h = 420, ml = 60, mt = 40, mb = 90;
    double vmax = values.empty() ? 1.0 : *std::max_element(values.begin(), values.end());
    if (vmax <= 0) vmax = 1.0;
    double bw = static_cast<double>(w - ml - 20) / std::max<size_t>(values.size(), 1);
    std::ofstream svg(out_dir_ + "/" + id + ".svg");
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>"
        << xml_escape(title) << "</text>\n";
    for (size_t i = 0; i < values.size(); ++i) {
        double bh = values[i] / vmax * (h - mt - mb);
        double x0 = ml + i * bw;
        svg << "<rect x='" << x0 + 2 << "' y='" << h - mb - bh << "' width='" << bw - 4
            << "' height='" << bh << "' fill='" << kPalette[i % 10] << "'/>\n";
        svg << "<text x='" << x0 + bw / 2 << "' y='" << h - mb + 12 << "' font-size='9' "
            << "text-anchor='end' transform='rotate(-45 " << x0 + bw / 2 << " " << h - mb + 12
            << ")'>" << xml_escape(labels[i]) << "</text>\n";
    }
    svg << "</svg>\n";
}

void PlotRegistry::heatmap(const std::string& id, const std::string& title,
                           const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& col_labels,
                           const std::vector<std::vector<double>>& values) {
    claim(id);
    std::ofstream csv(out_dir_ + "/" + id + ".csv");
    csv << "row";
    for (const auto& c : col_labels) csv << "," << c;
    csv << "\n";
    for (size_t r = 0; r < values.size(); ++r) {
        csv << row_labels[r];
        for (double v : values[r]) csv << "," << fmt(v);
        csv << "\n";
    }

    double vmax = 1e-12;
    for (const auto& row : values)
        for (double v : row) vmax = std::max(vmax, v);
    const int cell = 18, ml = 90, mt = 60;
    int w = ml + cell * static_cast<int>(col_labels.size()) + 20;
    int h = mt + cell * static_cast<int>(row_labels.size()) + 20;
    std::ofstream svg(out_dir_ + "/" + id + ".svg");
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>"
        << xml_escape(title) << "</text>\n";
    for (size_t c = 0; c < col_labels.size(); ++c)
        svg << "<text x='" << ml + cell * c + cell / 2 << "' y='" << mt - 6
            << "' font-size='8' text-anchor='start' transform='rotate(-60 " << ml + cell * c + cell / 2
            << " " << mt - 6 << ")'>" << xml_escape(col_labels[c]) << "</text>\n";
    for (size_t r = 0; r < values.size(); ++r) {
        svg << "<text x='" << ml - 4 << "' y='" << mt + cell * r + cell - 5
            << "' font-size='9' text-anchor='end'>" << xml_escape(row_labels[r]) << "</text>\n";
        for (size_t c = 0; c < values[r].size(); ++c) {
            int shade = static_cast<int>(255 - 220 * (values[r][c] / vmax));
            svg << "<rect x='" << ml + cell * c << "' y='" << mt + cell * r << "' width='" << cell
                << "' height='" << cell << "' fill='rgb(" << shade << "," << shade
                << ",255)' stroke='white'/>\n";
        }
    }
    svg << "</svg>\n";
}

}  // namespace tbench
