#include "voxelseg/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "voxelseg/errors.hpp"

namespace voxelseg::svg {

void write_plot(const std::filesystem::path& file, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                const std::vector<Series>& series) {
    const int width = 640, height = 420;
    const int ml = 60, mr = 20, mt = 40, mb = 50;

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax - xmin < 1e-12)
        xmax = xmin + 1;
    if (ymax - ymin < 1e-12)
        ymax = ymin + 1;

    const auto px = [&](double x) {
        return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr);
    };
    const auto py = [&](double y) {
        return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb);
    };

    std::ofstream out(file, std::ios::trunc);
    if (!out)
        throw DataError("cannot write SVG: " + file.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
        << title << "</text>\n";

    // Axes with a handful of ticks.
    out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
        << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << height - mb << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double x = xmin + (xmax - xmin) * i / 4.0;
        const double y = ymin + (ymax - ymin) * i / 4.0;
        out << "<text x=\"" << px(x) << "\" y=\"" << height - mb + 16
            << "\" text-anchor=\"middle\" font-size=\"10\">" << x << "</text>\n";
        out << "<text x=\"" << ml - 6 << "\" y=\"" << py(y) + 3
            << "\" text-anchor=\"end\" font-size=\"10\">" << y << "</text>\n";
    }
    out << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 12
        << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
    out << "<text x=\"14\" y=\"" << (mt + height - mb) / 2
        << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
        << (mt + height - mb) / 2 << ")\">" << y_label << "</text>\n";

    int legend_y = mt + 4;
    for (const auto& s : series) {
        if (s.points.empty())
            continue;
        if (s.scatter) {
            for (const auto& [x, y] : s.points)
                out << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y)
                    << "\" r=\"2.5\" fill=\"" << s.color << "\"/>\n";
        } else {
            out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& [x, y] : s.points)
                out << px(x) << "," << py(y) << " ";
            out << "\"/>\n";
        }
        out << "<text x=\"" << width - mr - 4 << "\" y=\"" << legend_y
            << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << s.color << "\">" << s.label
            << "</text>\n";
        legend_y += 14;
    }
    out << "</svg>\n";
}

} // namespace voxelseg::svg
