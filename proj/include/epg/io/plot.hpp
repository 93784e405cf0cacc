#pragma once

#include <string>
#include <vector>

namespace epg::io {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

// Minimal SVG line plot; log_x draws the x axis in log10.
void write_svg_plot(const std::string& path, const std::vector<Series>& series,
                    const std::string& title, const std::string& xlabel, const std::string& ylabel,
                    bool log_x = false);

}  // namespace epg::io
