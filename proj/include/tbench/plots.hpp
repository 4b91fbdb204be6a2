#pragma once

#include <map>
#include <string>
#include <vector>

namespace tbench {

// SVG chart emission. Every plot writes <id>.svg plus <id>.csv holding the
// exact plotted values; a plot id may be written only once per registry.
class PlotRegistry {
public:
    explicit PlotRegistry(std::string out_dir) : out_dir_(std::move(out_dir)) {}

    void line_chart(const std::string& id, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<double>& x,
                    const std::map<std::string, std::vector<double>>& series);

    void bar_chart(const std::string& id, const std::string& title,
                   const std::vector<std::string>& labels, const std::vector<double>& values);

    void heatmap(const std::string& id, const std::string& title,
                 const std::vector<std::string>& row_labels,
                 const std::vector<std::string>& col_labels,
                 const std::vector<std::vector<double>>& values);

    const std::vector<std::string>& written() const { return written_; }

private:
    void claim(const std::string& id);
    std::string out_dir_;
    std::vector<std::string> written_;
};

}  // namespace tbench
