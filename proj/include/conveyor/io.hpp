#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "motionplan.hpp"

namespace conveyor::io {

enum class Format { csv, json };

inline Format parse_format(const std::string& s) {
    if (s == "csv") return Format::csv;
    if (s == "json") return Format::json;
    throw ConfigError("unknown output format '" + s + "' (expected csv or json)");
}

// Shortest text that parses back to the same double.
inline std::string fmt(double x) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, end);
}

inline double parse_double(const std::string& s, const std::string& where) {
    double v = 0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && *b == ' ') ++b;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e) throw DataError("cannot parse number '" + s + "' in " + where);
    return v;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

// ---------------------------------------------------------------------------
// Waveforms

inline void write_waveform_csv(std::ostream& os, const CurrentWaveform& w) {
    os << "# sample_rate_Hz " << fmt(w.sample_rate) << "\n";
    os << "t_s";
    for (const auto& c : w.channels) os << ',' << c << "_A";
    os << "\n";
    for (std::size_t r = 0; r < w.t.size(); ++r) {
        os << fmt(w.t[r]);
        for (Eigen::Index c = 0; c < w.currents.cols(); ++c) os << ',' << fmt(w.currents(static_cast<Eigen::Index>(r), c));
        os << "\n";
    }
}

inline CurrentWaveform read_waveform_csv(std::istream& is) {
    CurrentWaveform w;
    std::string line;
    bool header = false;
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line.rfind("# sample_rate_Hz ", 0) == 0) {
            w.sample_rate = parse_double(line.substr(17), "waveform sample rate");
            continue;
        }
        if (line[0] == '#') continue;
        auto cells = split(line);
        if (!header) {
            if (cells.empty() || cells[0] != "t_s") throw DataError("waveform CSV must start with a t_s column");
            for (std::size_t i = 1; i < cells.size(); ++i) {
                auto name = cells[i];
                if (name.size() > 2 && name.compare(name.size() - 2, 2, "_A") == 0) name.resize(name.size() - 2);
                w.channels.push_back(name);
            }
            header = true;
            continue;
        }
        if (cells.size() != w.channels.size() + 1) throw DataError("waveform CSV row has the wrong column count");
        std::vector<double> row;
        for (const auto& c : cells) row.push_back(parse_double(c, "waveform CSV"));
        rows.push_back(std::move(row));
    }
    if (!header) throw DataError("waveform CSV has no header");
    w.currents.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(w.channels.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        w.t.push_back(rows[r][0]);
        for (std::size_t c = 0; c < w.channels.size(); ++c)
            w.currents(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c + 1];
    }
    return w;
}

inline nlohmann::json waveform_to_json(const CurrentWaveform& w) {
    nlohmann::json j;
    j["sample_rate_Hz"] = w.sample_rate;
    j["channels"] = w.channels;
    j["t_s"] = w.t;
    auto cols = nlohmann::json::array();
    for (Eigen::Index c = 0; c < w.currents.cols(); ++c) {
        std::vector<double> v(static_cast<std::size_t>(w.currents.rows()));
        for (Eigen::Index r = 0; r < w.currents.rows(); ++r) v[static_cast<std::size_t>(r)] = w.currents(r, c);
        cols.push_back(v);
    }
    j["currents_A"] = cols;
    return j;
}

inline CurrentWaveform waveform_from_json(const nlohmann::json& j) {
    CurrentWaveform w;
    try {
        w.sample_rate = j.at("sample_rate_Hz").get<double>();
        w.channels = j.at("channels").get<std::vector<std::string>>();
        w.t = j.at("t_s").get<std::vector<double>>();
        const auto& cols = j.at("currents_A");
        if (cols.size() != w.channels.size()) throw DataError("waveform JSON column count mismatch");
        w.currents.resize(static_cast<Eigen::Index>(w.t.size()), static_cast<Eigen::Index>(w.channels.size()));
        for (std::size_t c = 0; c < cols.size(); ++c) {
            auto v = cols[c].get<std::vector<double>>();
            if (v.size() != w.t.size()) throw DataError("waveform JSON column length mismatch");
            for (std::size_t r = 0; r < v.size(); ++r)
                w.currents(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r];
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed waveform JSON: ") + e.what());
    }
    return w;
}

inline void export_waveform(const CurrentWaveform& w, Format f, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open " + path + " for writing");
    if (f == Format::csv) write_waveform_csv(os, w);
    else os << waveform_to_json(w).dump() << "\n";
    if (!os) throw Error("write to " + path + " failed");
}

inline CurrentWaveform import_waveform(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path);
    if (path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0) {
        try {
            return waveform_from_json(nlohmann::json::parse(is));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(std::string("malformed waveform JSON: ") + e.what());
        }
    }
    return read_waveform_csv(is);
}

// ---------------------------------------------------------------------------
// Spatial current tables: s_m, then one column per channel

inline void write_spatial_csv(std::ostream& os, const SpatialProfile& p) {
    os << "s_m";
    for (const auto& c : p.channels) os << ",I_" << c << "_A";
    os << "\n";
    for (std::size_t r = 0; r < p.s.size(); ++r) {
        os << fmt(p.s[r]);
        for (Eigen::Index c = 0; c < p.currents.cols(); ++c) os << ',' << fmt(p.currents(static_cast<Eigen::Index>(r), c));
        os << "\n";
    }
}

inline nlohmann::json spatial_to_json(const SpatialProfile& p) {
    nlohmann::json j;
    j["channels"] = p.channels;
    j["s_m"] = p.s;
    j["breaks_m"] = p.breaks;
    auto cols = nlohmann::json::array();
    for (Eigen::Index c = 0; c < p.currents.cols(); ++c) {
        std::vector<double> v(static_cast<std::size_t>(p.currents.rows()));
        for (Eigen::Index r = 0; r < p.currents.rows(); ++r) v[static_cast<std::size_t>(r)] = p.currents(r, c);
        cols.push_back(v);
    }
    j["currents_A"] = cols;
    return j;
}

// Two-column (t_s, N) decay data.
inline std::vector<std::pair<double, double>> read_decay_csv(std::istream& is) {
    std::vector<std::pair<double, double>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto cells = split(line);
        if (cells.size() != 2) throw DataError("decay CSV needs two columns (t_s, N)");
        if (cells[0] == "t_s") continue;
        out.emplace_back(parse_double(cells[0], "decay CSV"), parse_double(cells[1], "decay CSV"));
    }
    return out;
}

}  // namespace conveyor::io
