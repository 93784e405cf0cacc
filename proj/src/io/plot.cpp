#include "epg/io/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace epg::io {

namespace {
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
}

void write_svg_plot(const std::string& path, const std::vector<Series>& series,
                    const std::string& title, const std::string& xlabel, const std::string& ylabel,
                    bool log_x) {
    const double W = 640, H = 420, ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            const double xv = log_x ? std::log10(std::max(s.x[i], 1e-300)) : s.x[i];
            xmin = std::min(xmin, xv);
            xmax = std::max(xmax, xv);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (!(xmax > xmin)) xmax = xmin + 1;
    if (!(ymax > ymin)) ymax = ymin + 1;
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double x) {
        const double v = log_x ? std::log10(std::max(x, 1e-300)) : x;
        return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr);
    };
    auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    svg << "<text x='" << W / 2 << "' y='" << H - 12 << "' text-anchor='middle' font-size='12'>"
        << xlabel << "</text>\n";
    svg << "<text x='16' y='" << H / 2 << "' text-anchor='middle' font-size='12' transform='rotate(-90 16 "
        << H / 2 << ")'>" << ylabel << "</text>\n";
    svg << "<rect x='" << ml << "' y='" << mt << "' width='" << W - ml - mr << "' height='"
        << H - mt - mb << "' fill='none' stroke='#888'/>\n";

    for (int g = 0; g <= 4; ++g) {
        const double yv = ymin + (ymax - ymin) * g / 4.0;
        svg << "<line x1='" << ml << "' y1='" << py(yv) << "' x2='" << W - mr << "' y2='" << py(yv)
            << "' stroke='#ddd'/>\n";
        svg << "<text x='" << ml - 6 << "' y='" << py(yv) + 4
            << "' text-anchor='end' font-size='10'>" << yv << "</text>\n";
    }

    size_t ci = 0;
    for (const auto& s : series) {
        svg << "<polyline fill='none' stroke='" << kColors[ci % 6] << "' stroke-width='1.5' points='";
        for (size_t i = 0; i < s.x.size(); ++i) svg << px(s.x[i]) << "," << py(s.y[i]) << " ";
        svg << "'/>\n";
        svg << "<text x='" << W - mr - 8 << "' y='" << mt + 16 + 14 * static_cast<double>(ci)
            << "' text-anchor='end' font-size='11' fill='" << kColors[ci % 6] << "'>" << s.name
            << "</text>\n";
        ++ci;
    }
    svg << "</svg>\n";

    std::ofstream out(path);
    out << svg.str();
}

}  // namespace epg::io
