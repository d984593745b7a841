#include "adapt/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "wire.hpp"

namespace adapt {

namespace fs = std::filesystem;

void write_atomic(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw dependency_error("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw dependency_error("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw dependency_error("cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw dependency_error("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    if (!in.good() && !in.eof()) throw dependency_error("read failure on " + path.string());
    return std::move(buf).str();
}

namespace {

constexpr const char* kMagic = "ADAPT-CKPT 1";

// Pulls the next newline-terminated line; the header is line-oriented and any
// structural deviation is a format error.
std::string next_line(const std::string& bytes, std::size_t& pos, const char* what) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) {
        throw format_error(std::string("checkpoint header truncated before ") + what);
    }
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
}

std::string expect_key(const std::string& line, const char* key) {
    const std::string prefix = std::string(key) + " ";
    if (line.rfind(prefix, 0) != 0) {
        throw format_error("checkpoint header: expected '" + std::string(key) + "', got '" +
                           line + "'");
    }
    return line.substr(prefix.size());
}

}  // namespace

void save_checkpoint(const ModelState& model, const CheckpointMeta& meta, const fs::path& path) {
    const ModelConfig& c = model.config;
    std::string out;
    out += kMagic;
    out += '\n';
    out += "stage " + std::to_string(meta.stage) + '\n';
    out += "seed " + std::to_string(meta.seed) + '\n';
    out += "config " + meta.config_hash + '\n';
    out += "model " + std::to_string(c.grid_rows) + ' ' + std::to_string(c.grid_cols) + ' ' +
           std::to_string(c.d_raw) + ' ' + std::to_string(c.d_hidden) + ' ' +
           std::to_string(c.d_latent) + ' ' + std::to_string(c.protos_per_class) + ' ' +
           std::to_string(c.attn_hidden) + '\n';
    out += "metrics " + meta.metrics.dump() + '\n';
    out += "end\n";

    wire::put_u64(out, model.params.values.size());
    for (double v : model.params.values) wire::put_f64(out, v);
    wire::put_u32(out, static_cast<std::uint32_t>(model.provenance.size()));
    for (const PushProvenance& p : model.provenance) {
        wire::put_i64(out, p.patch_id);
        wire::put_i64(out, p.row);
        wire::put_i64(out, p.col);
    }
    write_atomic(path, out);
}

std::pair<ModelState, CheckpointMeta> load_checkpoint(const fs::path& path) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    if (next_line(bytes, pos, "magic") != kMagic) {
        throw format_error(path.string() + ": not a checkpoint file");
    }
    CheckpointMeta meta;
    try {
        meta.stage = std::stoi(expect_key(next_line(bytes, pos, "stage"), "stage"));
        meta.seed = std::stoull(expect_key(next_line(bytes, pos, "seed"), "seed"));
    } catch (const std::logic_error&) {
        throw format_error(path.string() + ": malformed stage or seed field");
    }
    meta.config_hash = expect_key(next_line(bytes, pos, "config"), "config");

    ModelConfig cfg;
    {
        std::istringstream fields(expect_key(next_line(bytes, pos, "model"), "model"));
        if (!(fields >> cfg.grid_rows >> cfg.grid_cols >> cfg.d_raw >> cfg.d_hidden >>
              cfg.d_latent >> cfg.protos_per_class >> cfg.attn_hidden)) {
            throw format_error(path.string() + ": malformed model dimension line");
        }
    }
    cfg.validate();

    const std::string metrics_line = expect_key(next_line(bytes, pos, "metrics"), "metrics");
    meta.metrics = nlohmann::json::parse(metrics_line, nullptr, false);
    if (meta.metrics.is_discarded()) {
        throw format_error(path.string() + ": metrics line is not valid JSON");
    }
    if (next_line(bytes, pos, "end") != "end") {
        throw format_error(path.string() + ": missing end-of-header marker");
    }

    ModelState model;
    model.config = cfg;
    model.stage = meta.stage;
    model.params = ParamVector::zeros(model_layout(cfg));

    wire::Reader r(bytes, pos);
    const std::uint64_t n = r.u64();
    if (n != model.params.values.size()) {
        throw format_error(path.string() + ": parameter count " + std::to_string(n) +
                           " does not match the declared dimensions");
    }
    for (std::size_t i = 0; i < n; ++i) model.params.values[i] = r.f64();
    const std::uint32_t k = r.u32();
    if (static_cast<int>(k) != cfg.num_prototypes()) {
        throw format_error(path.string() + ": provenance count mismatch");
    }
    model.provenance.resize(k);
    for (auto& p : model.provenance) {
        p.patch_id = r.i64();
        p.row = static_cast<int>(r.i64());
        p.col = static_cast<int>(r.i64());
    }
    if (!r.done()) {
        throw format_error(path.string() + ": trailing bytes after checkpoint payload");
    }
    return {std::move(model), std::move(meta)};
}

}  // namespace adapt
