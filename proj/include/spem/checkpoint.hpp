#pragma once

// Checkpoint container: a text manifest followed by raw little-endian float64
// values.
//
//   SPEM-CHECKPOINT 1
//   config <key=value ...>
//   entries <k>
//   <name> <shape as AxBx..> <offset> <count>      (k lines, offsets in values)
//   values <total>
//   end
//   <total * 8 bytes>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spem/backbone.hpp"

namespace spem {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline std::string network_config_to_kv(const NetworkConfig& c)
{
    std::ostringstream os;
    os << "blocks=" << c.blocks_per_stage << " widths=" << c.stage_widths[0] << ',' << c.stage_widths[1] << ','
       << c.stage_widths[2] << " classes=" << c.num_classes << " attention=" << attention_name(c.attention.type)
       << " se_reduction=" << c.attention.se_reduction << " pooling=" << c.attention.pooling.to_string()
       << " reweight=" << reweight_name(c.attention.reweight);
    return os.str();
}

inline NetworkConfig network_config_from_kv(const std::string& text)
{
    NetworkConfig c;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw FormatError("bad config token '" + tok + "'");
        const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
        if (key == "blocks") {
            c.blocks_per_stage = std::stoul(value);
        } else if (key == "widths") {
            std::istringstream ws(value);
            std::string w;
            for (std::size_t i = 0; i < 3; ++i) {
                if (!std::getline(ws, w, ',')) throw FormatError("widths needs three values");
                c.stage_widths[i] = std::stoul(w);
            }
        } else if (key == "classes") {
            c.num_classes = std::stoul(value);
        } else if (key == "attention") {
            c.attention.type = parse_attention(value);
        } else if (key == "se_reduction") {
            c.attention.se_reduction = std::stoul(value);
        } else if (key == "pooling") {
            c.attention.pooling = PoolingConfig::parse(value);
        } else if (key == "reweight") {
            auto v = parse_reweight(value);
            if (!v) throw FormatError("unknown reweight variant '" + value + "'");
            c.attention.reweight = *v;
        } else {
            throw FormatError("unknown config key '" + key + "'");
        }
    }
    return c;
}

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t count = 0;
};

struct Checkpoint {
    NetworkConfig config;
    std::vector<CheckpointEntry> entries;
    std::vector<double> values;
};

template <typename T>
Checkpoint snapshot(Network<T>& net)
{
    Checkpoint ck;
    ck.config = net.config();
    auto push = [&](const std::string& name, const Shape& shape, auto values) {
        ck.entries.push_back({name, shape, ck.values.size(), values.size()});
        for (auto v : values) ck.values.push_back(static_cast<double>(v));
    };
    for (const auto& p : net.parameters()) push(p.name, p.tensor.shape(), p.tensor.data());
    for (auto& [name, buf] : net.buffers()) push(name, Shape{buf->size()}, std::span<const T>(*buf));
    return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out << "SPEM-CHECKPOINT 1\n";
    out << "config " << network_config_to_kv(ck.config) << '\n';
    out << "entries " << ck.entries.size() << '\n';
    for (const auto& e : ck.entries) {
        std::string dims;
        for (std::size_t i = 0; i < e.shape.size(); ++i) dims += (i ? "x" : "") + std::to_string(e.shape[i]);
        out << e.name << ' ' << dims << ' ' << e.offset << ' ' << e.count << '\n';
    }
    out << "values " << ck.values.size() << "\nend\n";
    out.write(reinterpret_cast<const char*>(ck.values.data()),
              static_cast<std::streamsize>(ck.values.size() * sizeof(double)));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::string line;
    auto next_line = [&](const char* what) {
        if (!std::getline(in, line)) throw FormatError(path.string() + ": truncated header, expected " + what);
    };
    next_line("magic");
    if (line != "SPEM-CHECKPOINT 1") throw FormatError(path.string() + ": not a checkpoint");
    Checkpoint ck;
    next_line("config");
    if (line.rfind("config ", 0) != 0) throw FormatError(path.string() + ": missing config line");
    ck.config = network_config_from_kv(line.substr(7));
    next_line("entries");
    std::size_t n = 0;
    if (std::sscanf(line.c_str(), "entries %zu", &n) != 1) throw FormatError(path.string() + ": bad entries line");
    for (std::size_t i = 0; i < n; ++i) {
        next_line("entry");
        std::istringstream ls(line);
        CheckpointEntry e;
        std::string dims;
        if (!(ls >> e.name >> dims >> e.offset >> e.count)) throw FormatError(path.string() + ": bad entry '" + line + "'");
        std::istringstream ds(dims);
        std::string d;
        while (std::getline(ds, d, 'x')) e.shape.push_back(std::stoul(d));
        if (shape_numel(e.shape) != e.count) throw FormatError(path.string() + ": entry " + e.name + " count mismatch");
        ck.entries.push_back(std::move(e));
    }
    next_line("values");
    std::size_t total = 0;
    if (std::sscanf(line.c_str(), "values %zu", &total) != 1) throw FormatError(path.string() + ": bad values line");
    next_line("end");
    if (line != "end") throw FormatError(path.string() + ": missing end marker");
    ck.values.resize(total);
    in.read(reinterpret_cast<char*>(ck.values.data()), static_cast<std::streamsize>(total * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != total * sizeof(double))
        throw FormatError(path.string() + ": payload shorter than " + std::to_string(total) + " values");
    for (const auto& e : ck.entries)
        if (e.offset + e.count > total) throw FormatError(path.string() + ": entry " + e.name + " past payload end");
    return ck;
}

template <typename T>
void restore(Network<T>& net, const Checkpoint& ck)
{
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : ck.entries) by_name[e.name] = &e;
    auto fill = [&](const std::string& name, std::size_t size, auto dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint has no entry '" + name + "'");
        if (it->second->count != size) throw FormatError("checkpoint entry '" + name + "' has the wrong size");
        for (std::size_t i = 0; i < size; ++i) dst[i] = static_cast<T>(ck.values[it->second->offset + i]);
    };
    for (auto& p : net.parameters()) {
        auto data = p.tensor.data();
        fill(p.name, data.size(), data.data());
    }
    for (auto& [name, buf] : net.buffers()) fill(name, buf->size(), buf->data());
}

template <typename T>
void save_checkpoint(Network<T>& net, const std::filesystem::path& path)
{
    write_checkpoint(snapshot(net), path);
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path)
{
    const auto ck = read_checkpoint(path);
    auto net = Network<T>::build(ck.config, 0);
    restore(net, ck);
    return net;
}

}  // namespace spem
