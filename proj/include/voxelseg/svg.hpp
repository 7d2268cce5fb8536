#pragma once
#include <filesystem>
#include <string>
#include <vector>

namespace voxelseg::svg {

struct Series {
    std::string label;
    std::string color = "#1f77b4";
    std::vector<std::pair<double, double>> points;
    bool scatter = false;
};

/// Minimal line/scatter plot writer; CSV stays the canonical output, the SVG
/// is a convenience rendering.
void write_plot(const std::filesystem::path& file, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                const std::vector<Series>& series);

} // namespace voxelseg::svg
