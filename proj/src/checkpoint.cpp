#include "hsae/checkpoint.hpp"

#include <fstream>
#include <limits>
#include <vector>

#include "hsae/binary_io.hpp"
#include "hsae/errors.hpp"

namespace hsae {

namespace {

constexpr char kMagic[5] = "HSAE";

std::uint32_t to_u32(Index v, const char* field) {
    if (v < 0 || v > static_cast<Index>(std::numeric_limits<std::uint32_t>::max())) {
        throw std::invalid_argument(std::string("write_model: ") + field + " does not fit in u32");
    }
    return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_param_blocks(std::ostream& os, const HsaeModel<float>& model) {
    auto& m = const_cast<HsaeModel<float>&>(model);
    std::vector<float> row_major;
    for (const auto& blk : param_blocks(m)) {
        if (blk.vec) {
            io::put_f32_block(os, blk.data(), static_cast<std::size_t>(blk.size()));
            continue;
        }
        row_major.resize(static_cast<std::size_t>(blk.size()));
        Eigen::Map<RowMat<float>>(row_major.data(), blk.rows(), blk.cols()) = *blk.mat;
        io::put_f32_block(os, row_major.data(), row_major.size());
    }
}

void read_param_blocks(std::istream& is, HsaeModel<float>& model, const std::string& what) {
    std::vector<float> row_major;
    for (const auto& blk : param_blocks(model)) {
        row_major.resize(static_cast<std::size_t>(blk.size()));
        io::get_f32_block(is, row_major.data(), row_major.size(), what + " (" + blk.label() + ")");
        if (blk.vec) {
            blk.flat() = Eigen::Map<Vec<float>>(row_major.data(), blk.size());
        } else {
            *blk.mat = Eigen::Map<RowMat<float>>(row_major.data(), blk.rows(), blk.cols());
        }
    }
}

void write_model(std::ostream& os, const HsaeModel<float>& model) {
    const HsaeConfig& c = model.config;
    io::put_magic(os, kMagic);
    io::put_le<std::uint32_t>(os, kModelVersion);
    io::put_le(os, to_u32(c.d, "d"));
    io::put_le(os, to_u32(c.m_top, "m_top"));
    io::put_le(os, to_u32(c.k, "k"));
    io::put_le(os, to_u32(c.a, "a"));
    io::put_le(os, to_u32(c.s, "s"));
    io::put_le<double>(os, c.threshold());
    io::put_le<double>(os, c.slope);
    io::put_le<double>(os, c.beta);
    io::put_le<double>(os, c.lambda1);
    io::put_le<double>(os, c.lambda2);
    io::put_le<std::uint8_t>(os, c.use_bias ? 1 : 0);
    write_param_blocks(os, model);
}

void write_model(const std::string& path, const HsaeModel<float>& model) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error(path + ": cannot open for writing");
    write_model(os, model);
    os.flush();
    if (!os) throw std::runtime_error(path + ": write failed");
}

HsaeModel<float> read_model(std::istream& is, const std::string& what, const HsaeConfig* expected) {
    if (!io::check_magic(is, kMagic)) throw FormatError(what + ": bad magic, not a model file");
    const auto version = io::get_le<std::uint32_t>(is, what);
    if (version != kModelVersion) {
        throw FormatError(what + ": unsupported model version " + std::to_string(version) + " (expected " +
                          std::to_string(kModelVersion) + ")");
    }
    HsaeConfig c;
    c.d = io::get_le<std::uint32_t>(is, what);
    c.m_top = io::get_le<std::uint32_t>(is, what);
    c.k = io::get_le<std::uint32_t>(is, what);
    c.a = io::get_le<std::uint32_t>(is, what);
    c.s = io::get_le<std::uint32_t>(is, what);
    c.alpha = io::get_le<double>(is, what);
    c.slope = io::get_le<double>(is, what);
    c.beta = io::get_le<double>(is, what);
    c.lambda1 = io::get_le<double>(is, what);
    c.lambda2 = io::get_le<double>(is, what);
    c.use_bias = io::get_le<std::uint8_t>(is, what) != 0;

    if (expected) {
        auto check = [&](const char* field, Index got, Index want) {
            if (got != want) {
                throw std::invalid_argument(what + ": shape mismatch in field '" + field + "': file has " +
                                            std::to_string(got) + ", expected " + std::to_string(want));
            }
        };
        check("d", c.d, expected->d);
        check("m_top", c.m_top, expected->m_top);
        check("k", c.k, expected->k);
        check("a", c.a, expected->a);
        check("s", c.s, expected->s);
        check("use_bias", c.use_bias, expected->use_bias);
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(what + ": invalid header: " + e.what());
    }
    HsaeModel<float> model = HsaeModel<float>::zeros(c);
    read_param_blocks(is, model, what);
    return model;
}

HsaeModel<float> read_model(const std::string& path, const HsaeConfig* expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error(path + ": cannot open model file");
    return read_model(is, path, expected);
}

}  // namespace hsae
