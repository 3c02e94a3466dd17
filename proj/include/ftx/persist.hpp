#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ftx/io.hpp"
#include "ftx/models.hpp"

namespace ftx {

// Checkpoint layout (version 1, all integers little-endian):
//
//   bytes  field
//   4      magic "FTX1"
//   4      u32 format version (1)
//   1      u8 architecture tag length
//   1..2   architecture tag: "ed", "e" or "d" (ASCII)
//   4      u32 hyperparameter block length K
//   K      hyperparameter text block: "key=value\n" lines in a fixed order
//   4      u32 tensor record count
//          per record, in canonical parameter order:
//            2        u16 name length L
//            L        name (ASCII)
//            1        u8 rank (1 or 2)
//            4*rank   u32 dims (rows [, cols])
//            8*n      f64 payload, row-major
//   4      u32 CRC-32 (IEEE) of every preceding byte
//
// Payloads are always 64-bit floats; a single-precision model is upcast on
// save. Writes go through a temp file + rename, so no partial checkpoint can
// be observed. Identical (theta, hp) serialize to identical bytes.

inline constexpr char kCheckpointMagic[4] = {'F', 'T', 'X', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            }
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) {
        crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    }
    return crc ^ 0xffffffffu;
}

inline void put_u16(std::string& out, std::uint16_t v) {
    out += static_cast<char>(v & 0xff);
    out += static_cast<char>((v >> 8) & 0xff);
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline void put_f64(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out += static_cast<char>((bits >> (8 * i)) & 0xff);
}

class Reader {
public:
    Reader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

    std::uint16_t u16() { return static_cast<std::uint16_t>(byte() | (byte() << 8)); }

    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return v;
    }

    double f64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
        return std::bit_cast<double>(v);
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool exhausted() const { return pos_ == limit_; }
    std::size_t pos() const { return pos_; }

private:
    std::uint8_t byte() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }

    void need(std::size_t n) {
        if (pos_ + n > limit_) {
            throw parse_error(parse_error::kind::truncated,
                              "checkpoint: truncated at byte " + std::to_string(pos_));
        }
    }

    const std::string& bytes_;
    std::size_t limit_;
    std::size_t pos_ = 0;
};

inline std::string format_hyperparams(const HyperParams& hp) {
    std::ostringstream out;
    out << "max_len=" << hp.max_len << "\n";
    if (hp.arch == Arch::encoder_decoder) {
        out << "n_layers_enc=" << hp.n_layers_enc << "\n";
        out << "n_layers_dec=" << hp.n_layers_dec << "\n";
    } else {
        out << "n_layers=" << hp.n_layers << "\n";
    }
    out << "n_heads=" << hp.n_heads << "\n";
    out << "d_e=" << hp.d_e << "\n";
    out << "d_attn=" << hp.d_attn << "\n";
    out << "d_mid=" << hp.d_mid << "\n";
    out << "d_mlp=" << hp.d_mlp << "\n";
    if (hp.arch == Arch::encoder_only) {
        out << "d_f=" << hp.final_width() << "\n";
    }
    out << "n_vocab=" << hp.n_vocab << "\n";
    out << "positional=" << (hp.positional == PositionalMode::learned ? "learned" : "sinusoidal")
        << "\n";
    out << "tied=" << (hp.tied_unembedding ? 1 : 0) << "\n";
    out << "norm=" << (hp.norm == NormMode::standard ? "standard" : "rms") << "\n";
    return out.str();
}

inline HyperParams parse_hyperparams(Arch arch, const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw parse_error(parse_error::kind::malformed,
                              "checkpoint: bad hyperparameter line '" + line + "'");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto take = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) {
            throw parse_error(parse_error::kind::malformed,
                              "checkpoint: missing hyperparameter '" + key + "'");
        }
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto take_int = [&](const std::string& key) {
        std::string v = take(key);
        try {
            return std::stoi(v);
        } catch (const std::exception&) {
            throw parse_error(parse_error::kind::malformed,
                              "checkpoint: hyperparameter '" + key + "' is not a number: " + v);
        }
    };

    HyperParams hp;
    hp.arch = arch;
    hp.max_len = take_int("max_len");
    if (hp.arch == Arch::encoder_decoder) {
        hp.n_layers_enc = take_int("n_layers_enc");
        hp.n_layers_dec = take_int("n_layers_dec");
    } else {
        hp.n_layers = take_int("n_layers");
    }
    hp.n_heads = take_int("n_heads");
    hp.d_e = take_int("d_e");
    hp.d_attn = take_int("d_attn");
    hp.d_mid = take_int("d_mid");
    hp.d_mlp = take_int("d_mlp");
    if (hp.arch == Arch::encoder_only) {
        hp.d_f = take_int("d_f");
    }
    hp.n_vocab = take_int("n_vocab");
    std::string pos = take("positional");
    if (pos == "learned") {
        hp.positional = PositionalMode::learned;
    } else if (pos == "sinusoidal") {
        hp.positional = PositionalMode::sinusoidal;
    } else {
        throw parse_error(parse_error::kind::malformed,
                          "checkpoint: unknown positional mode '" + pos + "'");
    }
    hp.tied_unembedding = take_int("tied") != 0;
    std::string norm = take("norm");
    if (norm == "standard") {
        hp.norm = NormMode::standard;
    } else if (norm == "rms") {
        hp.norm = NormMode::rms;
    } else {
        throw parse_error(parse_error::kind::malformed,
                          "checkpoint: unknown norm mode '" + norm + "'");
    }
    if (!kv.empty()) {
        throw parse_error(parse_error::kind::malformed,
                          "checkpoint: unknown hyperparameter '" + kv.begin()->first + "'");
    }
    hp.validate();
    return hp;
}

}  // namespace detail

// Serialize (theta, hp) to checkpoint bytes.
template <class T>
std::string format_checkpoint(const ModelParams<T>& params, const HyperParams& hp) {
    std::string out;
    out.append(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    std::string tag = arch_name(hp.arch);
    out += static_cast<char>(tag.size());
    out += tag;
    std::string hp_block = detail::format_hyperparams(hp);
    detail::put_u32(out, static_cast<std::uint32_t>(hp_block.size()));
    out += hp_block;

    auto named = named_params(params, hp);
    detail::put_u32(out, static_cast<std::uint32_t>(named.size()));
    for (const auto& np : named) {
        detail::put_u16(out, static_cast<std::uint16_t>(np.name.size()));
        out += np.name;
        out += static_cast<char>(np.tensor.rank());
        detail::put_u32(out, static_cast<std::uint32_t>(np.tensor.rows()));
        if (np.tensor.rank() == 2) {
            detail::put_u32(out, static_cast<std::uint32_t>(np.tensor.cols()));
        }
        for (T v : np.tensor.data()) {
            detail::put_f64(out, static_cast<double>(v));
        }
    }
    detail::put_u32(out, detail::crc32_ieee(reinterpret_cast<const std::uint8_t*>(out.data()),
                                            out.size()));
    return out;
}

template <class T>
void save_checkpoint(const ModelParams<T>& params, const HyperParams& hp,
                     const std::string& path) {
    atomic_write_file(path, format_checkpoint(params, hp));
}

struct LoadedCheckpoint {
    ModelParams<double> params;
    HyperParams hp;
};

// Parse checkpoint bytes, validating magic, version, CRC, record names and
// shapes; the record set must enumerate the architecture's parameter tree
// exactly (no extras, nothing missing).
inline LoadedCheckpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16) {
        throw parse_error(parse_error::kind::truncated, "checkpoint: file too short");
    }
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw parse_error(parse_error::kind::bad_magic, "checkpoint: bad magic (not FTX1)");
    }
    const std::size_t body_len = bytes.size() - 4;
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i) {
        stored_crc |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[body_len + i]))
                      << (8 * i);
    }
    std::uint32_t actual_crc =
        detail::crc32_ieee(reinterpret_cast<const std::uint8_t*>(bytes.data()), body_len);
    if (stored_crc != actual_crc) {
        throw parse_error(parse_error::kind::bad_crc, "checkpoint: CRC mismatch");
    }

    detail::Reader r(bytes, body_len);
    r.str(4);  // magic, already checked
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw parse_error(parse_error::kind::bad_version,
                          "checkpoint: unsupported version " + std::to_string(version));
    }
    std::size_t tag_len = static_cast<std::uint8_t>(r.str(1)[0]);
    std::string tag = r.str(tag_len);
    Arch arch;
    if (tag == "ed") {
        arch = Arch::encoder_decoder;
    } else if (tag == "e") {
        arch = Arch::encoder_only;
    } else if (tag == "d") {
        arch = Arch::decoder_only;
    } else {
        throw parse_error(parse_error::kind::malformed,
                          "checkpoint: unknown architecture tag '" + tag + "'");
    }
    std::uint32_t hp_len = r.u32();
    HyperParams hp = detail::parse_hyperparams(arch, r.str(hp_len));

    LoadedCheckpoint out{make_params<double>(hp), hp};
    auto named = named_params(out.params, hp);
    std::vector<std::pair<std::string, bool>> seen;  // preserves canonical order
    for (auto& np : named) {
        seen.push_back({np.name, false});
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < named.size(); ++i) index[named[i].name] = i;

    std::uint32_t count = r.u32();
    for (std::uint32_t rec = 0; rec < count; ++rec) {
        std::string name = r.str(r.u16());
        int rank = static_cast<std::uint8_t>(r.str(1)[0]);
        if (rank != 1 && rank != 2) {
            throw parse_error(parse_error::kind::malformed,
                              "checkpoint: tensor '" + name + "' has rank " +
                                  std::to_string(rank));
        }
        std::uint32_t rows = r.u32();
        std::uint32_t cols = rank == 2 ? r.u32() : 1;
        auto it = index.find(name);
        if (it == index.end()) {
            throw parse_error(parse_error::kind::unknown_tensor,
                              "checkpoint: unknown tensor record '" + name + "'");
        }
        if (seen[it->second].second) {
            throw parse_error(parse_error::kind::malformed,
                              "checkpoint: duplicate tensor record '" + name + "'");
        }
        Tensor<double>& target = named[it->second].tensor;
        if (static_cast<int>(rows) != target.rows() || static_cast<int>(cols) != target.cols() ||
            rank != target.rank()) {
            throw parse_error(parse_error::kind::malformed,
                              "checkpoint: tensor '" + name + "' has shape (" +
                                  std::to_string(rows) + "x" + std::to_string(cols) +
                                  "), expected " + target.shape_str());
        }
        auto data = target.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] = r.f64();
        }
        seen[it->second].second = true;
    }
    for (const auto& [name, was_seen] : seen) {
        if (!was_seen) {
            throw parse_error(parse_error::kind::missing_tensor,
                              "checkpoint: missing tensor record '" + name + "'");
        }
    }
    if (!r.exhausted()) {
        throw parse_error(parse_error::kind::malformed,
                          "checkpoint: " + std::to_string(body_len - r.pos()) +
                              " trailing bytes after the last record");
    }
    return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    return parse_checkpoint(read_file(path));
}

}  // namespace ftx
