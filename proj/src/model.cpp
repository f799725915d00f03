// SPDX-License-Identifier: Apache-2.0
#include "crisp/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "crisp/rng.hpp"

namespace crisp {

namespace {

constexpr int kCnnChannels1 = 16;
constexpr int kCnnChannels2 = 32;
constexpr int kEmbedPatch = 8;  // patch-embed kernel and stride

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        const size_t at = s.find(sep, start);
        out.push_back(s.substr(
            start, at == std::string::npos ? std::string::npos : at - start));
        if (at == std::string::npos) break;
        start = at + 1;
    }
    return out;
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("model config: key '" + key +
                          "' has non-integer value '" + value + "'");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

int ModelConfig::channels_at(int level) const {
    const int64_t c = static_cast<int64_t>(base_channels) << (level - 1);
    return static_cast<int>(
        std::min<int64_t>(c, static_cast<int64_t>(max_channels)));
}

void ModelConfig::validate() const {
    if (levels < 1 || levels > 6)
        throw ConfigError("model config: levels must lie in [1,6], got " +
                          std::to_string(levels));
    if (base_channels < 1)
        throw ConfigError("model config: base_channels must be positive");
    if (max_channels < base_channels)
        throw ConfigError(
            "model config: max_channels must be at least base_channels");
    for (size_t i = 0; i < wb_levels.size(); ++i) {
        if (wb_levels[i] < 1 || wb_levels[i] > levels)
            throw ConfigError("model config: wb_levels entry " +
                              std::to_string(wb_levels[i]) +
                              " outside [1," + std::to_string(levels) + "]");
        if (i > 0 && wb_levels[i] <= wb_levels[i - 1])
            throw ConfigError(
                "model config: wb_levels must be strictly increasing");
    }
    if (global_branch != "none" && global_branch != "cnn" &&
        global_branch != "xcit")
        throw ConfigError("model config: unknown global_branch '" +
                          global_branch + "'");
    if (global_branch == "xcit") {
        if (global_height % kEmbedPatch != 0 || global_width % kEmbedPatch != 0)
            throw ConfigError(
                "model config: global extents must divide the patch-embed "
                "stride 8, got " +
                std::to_string(global_height) + "x" +
                std::to_string(global_width));
        if ((global_height / kEmbedPatch) * (global_width / kEmbedPatch) < 2)
            throw ConfigError("model config: attention needs at least 2 tokens");
        if (xcit_heads < 1 || xcit_embed < xcit_heads ||
            xcit_embed % xcit_heads != 0)
            throw ConfigError(
                "model config: xcit_embed must be a positive multiple of "
                "xcit_heads");
        if (xcit_blocks < 1)
            throw ConfigError("model config: xcit_blocks must be positive");
    }
    if (global_branch == "cnn" &&
        (global_height % 16 != 0 || global_width % 16 != 0))
        throw ConfigError(
            "model config: the cnn branch downsamples by 16, global extents " +
            std::to_string(global_height) + "x" + std::to_string(global_width) +
            " must divide it");
    if (global_height < 8 || global_width < 8)
        throw ConfigError("model config: global extents must be at least 8x8");
}

std::string ModelConfig::serialize() const {
    std::ostringstream out;
    out << "levels=" << levels << '\n';
    out << "base_channels=" << base_channels << '\n';
    out << "max_channels=" << max_channels << '\n';
    out << "wb_levels=";
    for (size_t i = 0; i < wb_levels.size(); ++i)
        out << (i ? "," : "") << wb_levels[i];
    out << '\n';
    out << "pre_wb=" << (pre_wb ? 1 : 0) << '\n';
    out << "global_branch=" << global_branch << '\n';
    out << "global_height=" << global_height << '\n';
    out << "global_width=" << global_width << '\n';
    out << "xcit_embed=" << xcit_embed << '\n';
    out << "xcit_heads=" << xcit_heads << '\n';
    out << "xcit_blocks=" << xcit_blocks << '\n';
    return out.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> seen;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("model config: malformed line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (std::find(seen.begin(), seen.end(), key) != seen.end())
            throw ConfigError("model config: duplicate key '" + key + "'");
        seen.push_back(key);
        if (key == "levels") {
            cfg.levels = parse_int(key, value);
        } else if (key == "base_channels") {
            cfg.base_channels = parse_int(key, value);
        } else if (key == "max_channels") {
            cfg.max_channels = parse_int(key, value);
        } else if (key == "wb_levels") {
            cfg.wb_levels.clear();
            if (!value.empty())
                for (const std::string& part : split(value, ','))
                    cfg.wb_levels.push_back(parse_int(key, part));
        } else if (key == "pre_wb") {
            cfg.pre_wb = parse_int(key, value) != 0;
        } else if (key == "global_branch") {
            cfg.global_branch = value;
        } else if (key == "global_height") {
            cfg.global_height = parse_int(key, value);
        } else if (key == "global_width") {
            cfg.global_width = parse_int(key, value);
        } else if (key == "xcit_embed") {
            cfg.xcit_embed = parse_int(key, value);
        } else if (key == "xcit_heads") {
            cfg.xcit_heads = parse_int(key, value);
        } else if (key == "xcit_blocks") {
            cfg.xcit_blocks = parse_int(key, value);
        } else {
            throw ConfigError("model config: unknown key '" + key + "'");
        }
    }
    const char* required[] = {"levels",        "base_channels", "max_channels",
                              "wb_levels",     "pre_wb",        "global_branch",
                              "global_height", "global_width",  "xcit_embed",
                              "xcit_heads",    "xcit_blocks"};
    for (const char* key : required)
        if (std::find(seen.begin(), seen.end(), key) == seen.end())
            throw ConfigError(std::string("model config: missing key '") +
                              key + "'");
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

Tensor Model::find(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    for (const auto& [n, t] : buffers)
        if (n == name) return t;
    throw GraphError("model has no tensor named '" + name + "'");
}

bool Model::has(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return true;
    for (const auto& [n, t] : buffers)
        if (n == name) return true;
    return false;
}

Model build_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));

    auto param = [&](const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        m.params.emplace_back(name, std::move(t));
    };
    auto buffer = [&](const std::string& name, Tensor t) {
        m.buffers.emplace_back(name, std::move(t));
    };
    auto kaiming = [&](std::vector<int> shape, int64_t fan_in) {
        const float bound =
            std::sqrt(6.0f / static_cast<float>(std::max<int64_t>(fan_in, 1)));
        Tensor t = Tensor::zeros(shape);
        float* p = t.mutable_data();
        for (int64_t i = 0; i < t.numel(); ++i)
            p[i] = rng.uniform(-bound, bound);
        return t;
    };
    auto conv_pair = [&](const std::string& prefix, int cin, int cout, int k) {
        param(prefix + ".w", kaiming({cout, cin, k, k},
                                     static_cast<int64_t>(cin) * k * k));
        param(prefix + ".b", Tensor::zeros({cout}));
    };
    auto fc_pair = [&](const std::string& prefix, int in, int out,
                       float bias_value) {
        param(prefix + ".w", kaiming({in, out}, in));
        param(prefix + ".b", Tensor::full({out}, bias_value));
    };
    auto norm_pair = [&](const std::string& prefix, int dim) {
        param(prefix + ".g", Tensor::full({dim}, 1.0f));
        param(prefix + ".b", Tensor::zeros({dim}));
    };

    // encoder with metadata injection affines
    for (int l = 1; l <= config.levels; ++l) {
        const int cin = l == 1 ? 4 : config.channels_at(l - 1);
        const int c = config.channels_at(l);
        conv_pair("enc" + std::to_string(l) + ".conv1", cin, c, 3);
        conv_pair("enc" + std::to_string(l) + ".conv2", c, c, 3);
        if (std::find(config.wb_levels.begin(), config.wb_levels.end(), l) !=
            config.wb_levels.end()) {
            // zero weight + unit bias: the injection starts as the identity
            param("wb.l" + std::to_string(l) + ".w", Tensor::zeros({3, c}));
            param("wb.l" + std::to_string(l) + ".b", Tensor::full({c}, 1.0f));
        }
    }

    const int cb = config.bottleneck_channels();
    conv_pair("bott.conv1", config.channels_at(config.levels), cb, 3);
    conv_pair("bott.conv2", cb, cb, 3);
    for (int r = 1; r <= 3; ++r) {
        conv_pair("bott.res" + std::to_string(r) + ".conv1", cb, cb, 3);
        conv_pair("bott.res" + std::to_string(r) + ".conv2", cb, cb, 3);
    }

    for (int l = config.levels; l >= 1; --l) {
        const int cin = l == config.levels ? cb : config.channels_at(l + 1);
        const int c = config.channels_at(l);
        conv_pair("dec" + std::to_string(l) + ".up", cin, c, 3);
        conv_pair("dec" + std::to_string(l) + ".conv1", 2 * c, c, 3);
        conv_pair("dec" + std::to_string(l) + ".conv2", c, c, 3);
    }
    conv_pair("out.conv", config.channels_at(1), 3, 3);

    if (config.global_branch == "cnn") {
        // no conv biases here: batch-norm's mean subtraction would cancel
        // them exactly, leaving dead parameters
        param("cnn.conv1.w", kaiming({kCnnChannels1, 3, 3, 3}, 3 * 9));
        norm_pair("cnn.bn1", kCnnChannels1);
        buffer("cnn.bn1.rm", Tensor::zeros({kCnnChannels1}));
        buffer("cnn.bn1.rv", Tensor::full({kCnnChannels1}, 1.0f));
        param("cnn.conv2.w",
              kaiming({kCnnChannels2, kCnnChannels1, 3, 3}, kCnnChannels1 * 9));
        norm_pair("cnn.bn2", kCnnChannels2);
        buffer("cnn.bn2.rm", Tensor::zeros({kCnnChannels2}));
        buffer("cnn.bn2.rv", Tensor::full({kCnnChannels2}, 1.0f));
        const int flat =
            kCnnChannels2 * (config.global_height / 16) * (config.global_width / 16);
        fc_pair("cnn.fc", flat, cb, 1.0f);  // unit bias: modulation starts near 1
    } else if (config.global_branch == "xcit") {
        const int d = config.xcit_embed;
        const int dh = config.head_dim();
        param("xcit.embed.w",
              kaiming({d, 3, kEmbedPatch, kEmbedPatch},
                      3LL * kEmbedPatch * kEmbedPatch));
        param("xcit.embed.b", Tensor::zeros({d}));
        for (int i = 0; i < config.xcit_blocks; ++i) {
            const std::string blk = "xcit.blk" + std::to_string(i);
            norm_pair(blk + ".ln1", d);
            for (int h = 0; h < config.xcit_heads; ++h) {
                const std::string hp = blk + ".xca.h" + std::to_string(h);
                param(hp + ".wq", kaiming({d, dh}, d));
                param(hp + ".bq", Tensor::zeros({dh}));
                param(hp + ".wk", kaiming({d, dh}, d));
                param(hp + ".bk", Tensor::zeros({dh}));
                param(hp + ".wv", kaiming({d, dh}, d));
                param(hp + ".bv", Tensor::zeros({dh}));
            }
            param(blk + ".xca.temp", Tensor::full({config.xcit_heads}, 1.0f));
            fc_pair(blk + ".xca.wo", d, d, 0.0f);
            norm_pair(blk + ".ln2", d);
            param(blk + ".lpi.dw1.w", kaiming({d, 3, 3}, 9));
            param(blk + ".lpi.dw1.b", Tensor::zeros({d}));
            param(blk + ".lpi.dw2.w", kaiming({d, 3, 3}, 9));
            param(blk + ".lpi.dw2.b", Tensor::zeros({d}));
            norm_pair(blk + ".ln3", d);
            fc_pair(blk + ".ffn.fc1", d, 4 * d, 0.0f);
            fc_pair(blk + ".ffn.fc2", 4 * d, d, 0.0f);
        }
        {
            Tensor cls = Tensor::zeros({1, d});
            float* p = cls.mutable_data();
            for (int i = 0; i < d; ++i) p[i] = rng.uniform(-0.02f, 0.02f);
            param("xcit.cls", std::move(cls));
        }
        norm_pair("xcit.ca.ln1", d);
        for (int h = 0; h < config.xcit_heads; ++h) {
            const std::string hp = "xcit.ca.h" + std::to_string(h);
            param(hp + ".wq", kaiming({d, dh}, d));
            param(hp + ".bq", Tensor::zeros({dh}));
            param(hp + ".wk", kaiming({d, dh}, d));
            param(hp + ".bk", Tensor::zeros({dh}));
            param(hp + ".wv", kaiming({d, dh}, d));
            param(hp + ".bv", Tensor::zeros({dh}));
        }
        fc_pair("xcit.ca.wo", d, d, 0.0f);
        norm_pair("xcit.ca.ln2", d);
        fc_pair("xcit.ca.ffn.fc1", d, 4 * d, 0.0f);
        fc_pair("xcit.ca.ffn.fc2", 4 * d, d, 0.0f);
        norm_pair("xcit.final_ln", d);
        fc_pair("xcit.proj", d, cb, 1.0f);  // unit bias: modulation starts near 1
    }
    return m;
}

int64_t count_parameters(const Model& m) {
    int64_t n = 0;
    for (const auto& [name, t] : m.params) n += t.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Cross-covariance attention
// ---------------------------------------------------------------------------

Tensor xca_attention(const Tensor& q, const Tensor& k, const Tensor& tau) {
    const Tensor qn = l2_normalize(q, 0);
    const Tensor kn = l2_normalize(k, 0);
    return softmax(mul(matmul(transpose2d(kn), qn), tau), 0);
}

Tensor xca_apply(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor& tau) {
    return matmul(v, xca_attention(q, k, tau));
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace {

Tensor conv_block(const Model& m, const Tensor& x, const std::string& prefix) {
    Tensor y = relu(conv2d(x, m.find(prefix + ".conv1.w"),
                           m.find(prefix + ".conv1.b"), 1, 1));
    return relu(conv2d(y, m.find(prefix + ".conv2.w"),
                       m.find(prefix + ".conv2.b"), 1, 1));
}

Tensor wb_scales(const Model& m, const Tensor& wb, int level) {
    const std::string p = "wb.l" + std::to_string(level);
    const Tensor row =
        add(matmul(wb, m.find(p + ".w")), m.find(p + ".b"));  // [1, C]
    return reshape(row, {row.dim(1)});
}

Tensor linear_rows(const Model& m, const Tensor& x, const std::string& prefix) {
    return add(matmul(x, m.find(prefix + ".w")), m.find(prefix + ".b"));
}

Tensor head_slice(const Tensor& per_head, int index) {
    // [heads] parameter -> scalar [1] for head `index`, kept on the tape
    return reshape(slice_rows(reshape(per_head, {per_head.dim(0), 1}), index, 1),
                   {1});
}

Tensor cnn_feature(const Model& m, const Tensor& g, bool training) {
    Tensor x = conv2d(g, m.find("cnn.conv1.w"),
                      Tensor::zeros({kCnnChannels1}), 2, 1);
    x = batchnorm2d(x, m.find("cnn.bn1.g"), m.find("cnn.bn1.b"),
                    m.find("cnn.bn1.rm"), m.find("cnn.bn1.rv"), training);
    x = maxpool2x2(relu(x));
    x = conv2d(x, m.find("cnn.conv2.w"), Tensor::zeros({kCnnChannels2}), 2, 1);
    x = batchnorm2d(x, m.find("cnn.bn2.g"), m.find("cnn.bn2.b"),
                    m.find("cnn.bn2.rm"), m.find("cnn.bn2.rv"), training);
    x = maxpool2x2(relu(x));
    x = reshape(x, {1, static_cast<int>(x.numel())});
    const Tensor feat = linear_rows(m, x, "cnn.fc");  // [1, Cb]
    return reshape(feat, {feat.dim(1)});
}

Tensor xcit_feature(const Model& m, const Tensor& g) {
    const ModelConfig& cfg = m.config;
    const int d = cfg.xcit_embed;
    const int th = cfg.global_height / kEmbedPatch;
    const int tw = cfg.global_width / kEmbedPatch;
    const int tokens = th * tw;

    Tensor x = conv2d(g, m.find("xcit.embed.w"), m.find("xcit.embed.b"),
                      kEmbedPatch, 0);          // [D, th, tw]
    x = transpose2d(reshape(x, {d, tokens}));   // [T, D]

    for (int i = 0; i < cfg.xcit_blocks; ++i) {
        const std::string blk = "xcit.blk" + std::to_string(i);
        // cross-covariance attention
        Tensor xn = layernorm(x, m.find(blk + ".ln1.g"), m.find(blk + ".ln1.b"));
        const Tensor temp = m.find(blk + ".xca.temp");
        Tensor heads;
        for (int h = 0; h < cfg.xcit_heads; ++h) {
            const std::string hp = blk + ".xca.h" + std::to_string(h);
            const Tensor q = add(matmul(xn, m.find(hp + ".wq")), m.find(hp + ".bq"));
            const Tensor k = add(matmul(xn, m.find(hp + ".wk")), m.find(hp + ".bk"));
            const Tensor v = add(matmul(xn, m.find(hp + ".wv")), m.find(hp + ".bv"));
            const Tensor out = xca_apply(q, k, v, head_slice(temp, h));
            heads = h == 0 ? out : concat(heads, out, 1);
        }
        x = add(x, linear_rows(m, heads, blk + ".xca.wo"));

        // local patch interaction on the token grid
        xn = layernorm(x, m.find(blk + ".ln2.g"), m.find(blk + ".ln2.b"));
        Tensor s = reshape(transpose2d(xn), {d, th, tw});
        s = dwconv2d(s, m.find(blk + ".lpi.dw1.w"), m.find(blk + ".lpi.dw1.b"), 1);
        s = dwconv2d(gelu(s), m.find(blk + ".lpi.dw2.w"),
                     m.find(blk + ".lpi.dw2.b"), 1);
        x = add(x, transpose2d(reshape(s, {d, tokens})));

        // feed-forward
        xn = layernorm(x, m.find(blk + ".ln3.g"), m.find(blk + ".ln3.b"));
        x = add(x, linear_rows(m, gelu(linear_rows(m, xn, blk + ".ffn.fc1")),
                               blk + ".ffn.fc2"));
    }

    // class attention: a learnable summary token queries all tokens once
    Tensor xc = concat(x, m.find("xcit.cls"), 0);  // [T+1, D], summary last
    Tensor xn = layernorm(xc, m.find("xcit.ca.ln1.g"), m.find("xcit.ca.ln1.b"));
    const Tensor qrow = slice_rows(xn, tokens, 1);  // [1, D]
    const float inv_sqrt_dh =
        1.0f / std::sqrt(static_cast<float>(cfg.head_dim()));
    Tensor heads;
    for (int h = 0; h < cfg.xcit_heads; ++h) {
        const std::string hp = "xcit.ca.h" + std::to_string(h);
        const Tensor q = add(matmul(qrow, m.find(hp + ".wq")), m.find(hp + ".bq"));
        const Tensor k = add(matmul(xn, m.find(hp + ".wk")), m.find(hp + ".bk"));
        const Tensor v = add(matmul(xn, m.find(hp + ".wv")), m.find(hp + ".bv"));
        const Tensor attn =
            softmax(scale(matmul(q, transpose2d(k)), inv_sqrt_dh), 1);
        const Tensor out = matmul(attn, v);  // [1, dh]
        heads = h == 0 ? out : concat(heads, out, 1);
    }
    Tensor cls = add(slice_rows(xc, tokens, 1),
                     linear_rows(m, heads, "xcit.ca.wo"));
    const Tensor cn =
        layernorm(cls, m.find("xcit.ca.ln2.g"), m.find("xcit.ca.ln2.b"));
    cls = add(cls, linear_rows(m, gelu(linear_rows(m, cn, "xcit.ca.ffn.fc1")),
                               "xcit.ca.ffn.fc2"));
    cls = layernorm(cls, m.find("xcit.final_ln.g"), m.find("xcit.final_ln.b"));
    const Tensor feat = linear_rows(m, cls, "xcit.proj");  // [1, Cb]
    return reshape(feat, {feat.dim(1)});
}

}  // namespace

Tensor global_feature(const Model& m, const Tensor& global_rgb, bool training) {
    if (m.config.global_branch == "none")
        throw GraphError("global_feature: model has no global branch");
    if (!global_rgb.defined() || global_rgb.rank() != 3 ||
        global_rgb.dim(0) != 3 || global_rgb.dim(1) != m.config.global_height ||
        global_rgb.dim(2) != m.config.global_width)
        throw ShapeError(
            "global_feature: input must be [3," +
            std::to_string(m.config.global_height) + "," +
            std::to_string(m.config.global_width) + "], got " +
            (global_rgb.defined() ? shape_str(global_rgb.shape()) : "undefined"));
    return m.config.global_branch == "cnn" ? cnn_feature(m, global_rgb, training)
                                           : xcit_feature(m, global_rgb);
}

Tensor reconstruct(const Model& m, const Tensor& packed, const Tensor& wb,
                   const Tensor& feature, bool training) {
    (void)training;
    const ModelConfig& cfg = m.config;
    if (!packed.defined() || packed.rank() != 3 || packed.dim(0) != 4)
        throw ShapeError("reconstruct: packed input must be [4,H,W], got " +
                         (packed.defined() ? shape_str(packed.shape())
                                           : std::string("undefined")));
    if (!wb.defined() || wb.rank() != 2 || wb.dim(0) != 1 || wb.dim(1) != 3)
        throw ShapeError("reconstruct: wb input must be [1,3]");
    const int h = packed.dim(1), w = packed.dim(2);
    for (int l = 1; l <= cfg.levels; ++l) {
        if ((h >> (l - 1)) % 2 != 0 || (w >> (l - 1)) % 2 != 0)
            throw ShapeError(
                "reconstruct: packed extents " + std::to_string(h) + "x" +
                std::to_string(w) + " stop halving at pooling level " +
                std::to_string(l) + " (need divisibility by " +
                std::to_string(1 << cfg.levels) + ")");
    }
    if (cfg.global_branch != "none" && !feature.defined())
        throw GraphError(
            "reconstruct: the configured global branch requires a feature "
            "vector");

    Tensor x = packed;
    if (cfg.pre_wb) {
        // constant channel gains (R, G1, B, G2) taken from the metadata row
        const float* g = wb.data();
        x = mul(x, Tensor::from_data({4}, {g[0], g[1], g[2], g[1]}));
    }

    std::vector<Tensor> skips;
    for (int l = 1; l <= cfg.levels; ++l) {
        x = conv_block(m, x, "enc" + std::to_string(l));
        if (std::find(cfg.wb_levels.begin(), cfg.wb_levels.end(), l) !=
            cfg.wb_levels.end())
            x = mul(x, wb_scales(m, wb, l));
        skips.push_back(x);
        x = maxpool2x2(x);
    }

    x = conv_block(m, x, "bott");
    for (int r = 1; r <= 3; ++r) {
        const std::string rp = "bott.res" + std::to_string(r);
        Tensor t = relu(conv2d(x, m.find(rp + ".conv1.w"),
                               m.find(rp + ".conv1.b"), 1, 1));
        t = conv2d(t, m.find(rp + ".conv2.w"), m.find(rp + ".conv2.b"), 1, 1);
        x = relu(add(x, t));
    }
    if (feature.defined()) x = mul(x, feature);

    for (int l = cfg.levels; l >= 1; --l) {
        const std::string dp = "dec" + std::to_string(l);
        x = relu(conv2d(upsample2x(x), m.find(dp + ".up.w"),
                        m.find(dp + ".up.b"), 1, 1));
        x = concat(x, skips[static_cast<size_t>(l - 1)], 0);
        x = conv_block(m, x, dp);
    }
    return conv2d(upsample2x(x), m.find("out.conv.w"), m.find("out.conv.b"), 1,
                  1);
}

Tensor forward(const Model& m, const ForwardInput& in, bool training) {
    Tensor feature;
    if (m.config.global_branch != "none") {
        if (!in.global_rgb.defined())
            throw GraphError(
                "forward: the configured global branch needs the downsampled "
                "frame input");
        feature = global_feature(m, in.global_rgb, training);
    }
    return reconstruct(m, in.packed, in.wb, feature, training);
}

// ---------------------------------------------------------------------------
// Full-frame inference
// ---------------------------------------------------------------------------

Tensor packed_to_tensor(const PackedRaw& packed) {
    std::vector<float> planar(static_cast<size_t>(packed.height) *
                              packed.width * 4);
    const int64_t plane = static_cast<int64_t>(packed.height) * packed.width;
    for (int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < 4; ++c)
            planar[static_cast<size_t>(c * plane + p)] =
                packed.data[static_cast<size_t>(p * 4 + c)];
    return Tensor::from_data({4, packed.height, packed.width},
                             std::move(planar));
}

Tensor global_to_tensor(const GlobalInput& global) {
    std::vector<float> planar(static_cast<size_t>(global.height) *
                              global.width * 3);
    const int64_t plane = static_cast<int64_t>(global.height) * global.width;
    for (int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c)
            planar[static_cast<size_t>(c * plane + p)] =
                global.data[static_cast<size_t>(p * 3 + c)];
    return Tensor::from_data({3, global.height, global.width},
                             std::move(planar));
}

Tensor wb_to_tensor(const CaptureMeta& meta) {
    return Tensor::from_data({1, 3}, {meta.wb_r, meta.wb_g, meta.wb_b});
}

RgbImage infer_full(const Model& m, const BayerFrame& frame,
                    const CaptureMeta& meta, int patch, InferStats* stats) {
    if (patch <= 0)
        throw ConfigError("infer_full: patch must be positive, got " +
                          std::to_string(patch));
    InferStats local;
    const PackedRaw packed = pack(frame);
    const Tensor wb = wb_to_tensor(meta);

    Tensor feature;
    if (m.config.global_branch != "none") {
        feature = global_feature(
            m,
            global_to_tensor(make_global_input(packed, m.config.global_height,
                                               m.config.global_width)),
            false);
        local.global_evals = 1;
    }

    TileLayout layout;
    const std::vector<PackedRaw> tiles =
        tile_packed(packed, patch, patch, &layout);
    std::vector<RgbImage> pieces;
    pieces.reserve(tiles.size());
    for (const PackedRaw& tile : tiles) {
        const Tensor y =
            reconstruct(m, packed_to_tensor(tile), wb, feature, false);
        RgbImage piece(2 * patch, 2 * patch);
        const int64_t plane = static_cast<int64_t>(2 * patch) * (2 * patch);
        const float* py = y.data();
        for (int64_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c)
                piece.data[static_cast<size_t>(p * 3 + c)] =
                    std::clamp(py[c * plane + p], 0.0f, 1.0f);
        pieces.push_back(std::move(piece));
        ++local.patches;
    }

    TileLayout out_layout;
    out_layout.image_h = 2 * packed.height;
    out_layout.image_w = 2 * packed.width;
    out_layout.channels = 3;
    out_layout.patch_h = 2 * patch;
    out_layout.patch_w = 2 * patch;
    for (const auto& [y, x] : layout.positions)
        out_layout.positions.emplace_back(2 * y, 2 * x);

    RgbImage out = untile_rgb(pieces, out_layout);
    out.linear = false;
    if (stats) *stats = local;
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_model(const Model& m, const std::string& path) {
    std::vector<std::pair<std::string, Tensor>> tensors = m.params;
    tensors.insert(tensors.end(), m.buffers.begin(), m.buffers.end());
    save_checkpoint(path, m.config.serialize(), tensors);
}

namespace {

void copy_into(Model& m, const Checkpoint& ckpt, const std::string& path) {
    const size_t expected = m.params.size() + m.buffers.size();
    if (ckpt.tensors.size() != expected)
        throw ConfigError("checkpoint " + path + " holds " +
                          std::to_string(ckpt.tensors.size()) +
                          " tensors, model expects " +
                          std::to_string(expected));
    for (const auto& [name, src] : ckpt.tensors) {
        if (!m.has(name))
            throw ConfigError("checkpoint " + path +
                              " holds tensor '" + name +
                              "' that the model does not define");
        Tensor dst = m.find(name);
        if (dst.shape() != src.shape())
            throw ConfigError("checkpoint " + path + " tensor '" + name +
                              "' has shape " + shape_str(src.shape()) +
                              ", model expects " + shape_str(dst.shape()));
        std::copy(src.data(), src.data() + src.numel(), dst.mutable_data());
    }
}

}  // namespace

Model load_model(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    Model m = build_model(ModelConfig::parse(ckpt.config_echo), 0);
    copy_into(m, ckpt, path);
    return m;
}

void load_weights(Model& m, const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    const ModelConfig stored = ModelConfig::parse(ckpt.config_echo);
    if (!(stored == m.config))
        throw ConfigError("checkpoint " + path +
                          " was produced by a different model configuration");
    copy_into(m, ckpt, path);
}

}  // namespace crisp
