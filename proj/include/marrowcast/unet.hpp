#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "marrowcast/error.hpp"
#include "marrowcast/nn.hpp"
#include "marrowcast/rng.hpp"
#include "marrowcast/tensor.hpp"

namespace marrowcast {

enum class loss_kind { bce, weighted_bce };

inline std::string to_string(loss_kind k) {
    return k == loss_kind::bce ? "bce" : "weighted_bce";
}

inline loss_kind loss_kind_from_string(const std::string& s) {
    if (s == "bce") return loss_kind::bce;
    if (s == "weighted_bce") return loss_kind::weighted_bce;
    throw config_error("unknown loss kind '" + s + "'");
}

struct unet_config {
    int input_size = 64;
    int in_channels = 1;
    int depth = 3;          // number of down-blocks
    int base_channels = 16;
    double channel_growth = 2.0;
    loss_kind loss = loss_kind::bce;
    double w_pos = 1.0; // only used by weighted_bce
    double lr = 1e-4;
    int epochs = 10;
    int batch_size = 4;
    std::uint64_t seed = 0;

    int channels_at(int level) const {
        const double c = base_channels * std::pow(channel_growth, level);
        return std::max(1, static_cast<int>(std::llround(c)));
    }

    void validate() const {
        if (input_size < 1 || in_channels < 1 || depth < 1 || base_channels < 1 ||
            epochs < 1 || batch_size < 1) {
            throw config_error("unet: all counts must be >= 1");
        }
        const int div = 1 << depth;
        if (input_size % div != 0) {
            throw config_error("unet: input_size " + std::to_string(input_size) +
                               " not divisible by 2^depth = " + std::to_string(div));
        }
        if (channel_growth <= 0.0) {
            throw config_error("unet: channel_growth must be > 0");
        }
        if (lr <= 0.0 || !std::isfinite(lr)) {
            throw config_error("unet: lr must be positive and finite");
        }
        if (w_pos < 0.0 || !std::isfinite(w_pos)) {
            throw config_error("unet: w_pos must be finite and >= 0");
        }
    }
};

// Slice input at the paper's stated working size.
inline unet_config bonenet_default() {
    unet_config c;
    c.input_size = 384;
    c.depth = 4;
    c.base_channels = 16;
    c.loss = loss_kind::bce;
    c.batch_size = 4;
    return c;
}

// Patch input at the paper's stated working size.
inline unet_config lesionnet_default() {
    unet_config c;
    c.input_size = 64;
    c.depth = 3;
    c.base_channels = 16;
    c.loss = loss_kind::weighted_bce;
    c.batch_size = 32;
    return c;
}

struct conv_layer {
    std::string name;
    tensor4f k;
    std::vector<float> b;
    adam_state st_k, st_b;
};

// Layer order: per down-block two convs; two bottleneck convs; per up-block an
// up-conv (applied after nearest upsampling) and two convs; a final conv to
// one channel followed by a sigmoid.
struct unet_model {
    unet_config config;
    std::vector<conv_layer> layers;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const conv_layer& l : layers) n += l.k.data.size() + l.b.size();
        return n;
    }
};

namespace detail {

inline conv_layer make_layer(const std::string& name, int c_in, int c_out, double lr) {
    conv_layer l;
    l.name = name;
    l.k = tensor4f(c_out, c_in, 3, 3);
    l.b.assign(static_cast<std::size_t>(c_out), 0.0f);
    l.st_k.cfg.lr = lr;
    l.st_b.cfg.lr = lr;
    l.st_k.reset(l.k.data.size());
    l.st_b.reset(l.b.size());
    return l;
}

inline unet_model make_skeleton(const unet_config& cfg) {
    cfg.validate();
    unet_model m;
    m.config = cfg;
    const int d = cfg.depth;
    for (int b = 0; b < d; ++b) {
        const int c_in = b == 0 ? cfg.in_channels : cfg.channels_at(b - 1);
        const int c = cfg.channels_at(b);
        const std::string base = "enc" + std::to_string(b);
        m.layers.push_back(make_layer(base + ".a", c_in, c, cfg.lr));
        m.layers.push_back(make_layer(base + ".b", c, c, cfg.lr));
    }
    const int cb = cfg.channels_at(d);
    m.layers.push_back(make_layer("bottleneck.a", cfg.channels_at(d - 1), cb, cfg.lr));
    m.layers.push_back(make_layer("bottleneck.b", cb, cb, cfg.lr));
    for (int b = d - 1; b >= 0; --b) {
        const int c = cfg.channels_at(b);
        const int c_above = b == d - 1 ? cb : cfg.channels_at(b + 1);
        const std::string base = "dec" + std::to_string(b);
        m.layers.push_back(make_layer(base + ".up", c_above, c, cfg.lr));
        m.layers.push_back(make_layer(base + ".a", 2 * c, c, cfg.lr));
        m.layers.push_back(make_layer(base + ".b", c, c, cfg.lr));
    }
    m.layers.push_back(make_layer("head", cfg.channels_at(0), 1, cfg.lr));
    return m;
}

} // namespace detail

// He-style initialization from a stream derived off `seed`; biases start at 0.
inline unet_model build_unet(unet_config cfg, std::uint64_t seed) {
    cfg.seed = seed;
    unet_model m = detail::make_skeleton(cfg);
    rng_stream rng(seed, "init");
    for (conv_layer& l : m.layers) {
        const double fan_in = static_cast<double>(l.k.c) * 9.0;
        const double sd = std::sqrt(2.0 / fan_in);
        for (float& v : l.k.data) {
            v = static_cast<float>(rng.normal(0.0, sd));
        }
    }
    return m;
}

namespace detail {

struct unet_cache {
    std::vector<tensor4f> enc_in, enc_mid, skips;
    std::vector<std::vector<std::uint32_t>> pool_idx;
    tensor4f bott_in, bott_mid, bott_out;
    // decoder tensors in processing order (deepest block first)
    std::vector<tensor4f> dec_up, dec_ue, dec_cat, dec_mid, dec_out;
    tensor4f prob;
};

inline void check_input(const unet_model& m, const tensor4f& x) {
    if (x.c != m.config.in_channels || x.h != m.config.input_size || x.w != m.config.input_size) {
        throw shape_error("unet forward: input " + x.shape_str() + " does not match config (" +
                          std::to_string(m.config.in_channels) + " ch, " +
                          std::to_string(m.config.input_size) + " px)");
    }
    if (x.n < 1) {
        throw shape_error("unet forward: empty batch");
    }
}

inline tensor4f run_forward(const unet_model& m, const tensor4f& x, unet_cache* cache) {
    check_input(m, x);
    const int d = m.config.depth;
    const conv_layer* L = m.layers.data();
    tensor4f t = x;
    std::vector<tensor4f> skips;
    skips.reserve(static_cast<std::size_t>(d));
    for (int b = 0; b < d; ++b) {
        if (cache) cache->enc_in.push_back(t);
        t = elu(conv2d(t, L[2 * b].k, L[2 * b].b));
        if (cache) cache->enc_mid.push_back(t);
        t = elu(conv2d(t, L[2 * b + 1].k, L[2 * b + 1].b));
        skips.push_back(t);
        pool2_result<float> p = max_pool2(t);
        if (cache) cache->pool_idx.push_back(std::move(p.argmax));
        t = std::move(p.y);
    }
    if (cache) cache->bott_in = t;
    t = elu(conv2d(t, L[2 * d].k, L[2 * d].b));
    if (cache) cache->bott_mid = t;
    t = elu(conv2d(t, L[2 * d + 1].k, L[2 * d + 1].b));
    if (cache) cache->bott_out = t;
    for (int b = d - 1; b >= 0; --b) {
        const std::size_t li = static_cast<std::size_t>(2 * d + 2 + 3 * (d - 1 - b));
        tensor4f up = upsample2(t);
        tensor4f ue = elu(conv2d(up, L[li].k, L[li].b));
        tensor4f cat = concat_channels(ue, skips[static_cast<std::size_t>(b)]);
        tensor4f mid = elu(conv2d(cat, L[li + 1].k, L[li + 1].b));
        t = elu(conv2d(mid, L[li + 2].k, L[li + 2].b));
        if (cache) {
            cache->dec_up.push_back(std::move(up));
            cache->dec_ue.push_back(std::move(ue));
            cache->dec_cat.push_back(std::move(cat));
            cache->dec_mid.push_back(std::move(mid));
            cache->dec_out.push_back(t);
        }
    }
    if (cache) cache->skips = std::move(skips);
    const conv_layer& head = m.layers.back();
    tensor4f prob = sigmoid(conv2d(t, head.k, head.b));
    if (cache) cache->prob = prob;
    return prob;
}

inline void add_inplace(tensor4f& a, const tensor4f& b) {
    if (!a.same_shape(b)) {
        throw shape_error("gradient join: shape mismatch");
    }
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

} // namespace detail

inline tensor4f forward(const unet_model& m, const tensor4f& x) {
    return detail::run_forward(m, x, nullptr);
}

struct layer_grads {
    tensor4f k;
    std::vector<float> b;
};

struct backprop_result {
    double loss = 0.0;
    std::vector<layer_grads> grads; // indexed like model.layers
};

// Forward pass, loss against `target`, and analytic gradients for every
// parameter tensor. Does not update the model.
inline backprop_result backprop(const unet_model& m, const tensor4f& x, const tensor4f& target) {
    detail::unet_cache cache;
    detail::run_forward(m, x, &cache);

    const loss_result<float> loss = m.config.loss == loss_kind::bce
                                        ? bce_loss(cache.prob, target)
                                        : weighted_bce_loss(cache.prob, target, m.config.w_pos);

    backprop_result out;
    out.loss = loss.value;
    out.grads.resize(m.layers.size());
    const int d = m.config.depth;
    const conv_layer* L = m.layers.data();

    // head
    tensor4f g = sigmoid_backward(cache.prob, loss.grad);
    {
        const std::size_t hi = m.layers.size() - 1;
        conv2d_grads<float> cg = conv2d_backward(cache.dec_out.back(), L[hi].k, g);
        out.grads[hi] = {std::move(cg.gk), std::move(cg.gb)};
        g = std::move(cg.gx);
    }

    // decoder blocks, reverse of processing order
    std::vector<tensor4f> skip_grads(static_cast<std::size_t>(d));
    for (std::size_t j = static_cast<std::size_t>(d); j-- > 0;) {
        const int b = d - 1 - static_cast<int>(j); // block index of cache position j
        const std::size_t li = static_cast<std::size_t>(2 * d + 2) + 3 * j;
        g = elu_backward(cache.dec_out[j], g);
        conv2d_grads<float> g2 = conv2d_backward(cache.dec_mid[j], L[li + 2].k, g);
        out.grads[li + 2] = {std::move(g2.gk), std::move(g2.gb)};
        g = elu_backward(cache.dec_mid[j], g2.gx);
        conv2d_grads<float> g1 = conv2d_backward(cache.dec_cat[j], L[li + 1].k, g);
        out.grads[li + 1] = {std::move(g1.gk), std::move(g1.gb)};
        auto split = concat_channels_backward(cache.dec_ue[j].c,
                                              cache.skips[static_cast<std::size_t>(b)].c, g1.gx);
        skip_grads[static_cast<std::size_t>(b)] = std::move(split.second);
        g = elu_backward(cache.dec_ue[j], split.first);
        conv2d_grads<float> g0 = conv2d_backward(cache.dec_up[j], L[li].k, g);
        out.grads[li] = {std::move(g0.gk), std::move(g0.gb)};
        g = upsample2_backward(g0.gx);
    }

    // bottleneck
    g = elu_backward(cache.bott_out, g);
    {
        conv2d_grads<float> cg = conv2d_backward(cache.bott_mid, L[2 * d + 1].k, g);
        out.grads[static_cast<std::size_t>(2 * d + 1)] = {std::move(cg.gk), std::move(cg.gb)};
        g = elu_backward(cache.bott_mid, cg.gx);
    }
    {
        conv2d_grads<float> cg = conv2d_backward(cache.bott_in, L[2 * d].k, g);
        out.grads[static_cast<std::size_t>(2 * d)] = {std::move(cg.gk), std::move(cg.gb)};
        g = std::move(cg.gx);
    }

    // encoder blocks, deepest first; the skip gradient joins after the pool
    for (int b = d - 1; b >= 0; --b) {
        const std::size_t sb = static_cast<std::size_t>(b);
        g = max_pool2_backward(cache.skips[sb], cache.pool_idx[sb], g);
        detail::add_inplace(g, skip_grads[sb]);
        g = elu_backward(cache.skips[sb], g);
        conv2d_grads<float> g1 = conv2d_backward(cache.enc_mid[sb], L[2 * b + 1].k, g);
        out.grads[static_cast<std::size_t>(2 * b + 1)] = {std::move(g1.gk), std::move(g1.gb)};
        g = elu_backward(cache.enc_mid[sb], g1.gx);
        conv2d_grads<float> g0 = conv2d_backward(cache.enc_in[sb], L[2 * b].k, g);
        out.grads[static_cast<std::size_t>(2 * b)] = {std::move(g0.gk), std::move(g0.gb)};
        g = std::move(g0.gx);
    }
    return out;
}

inline void apply_gradients(unet_model& m, const std::vector<layer_grads>& grads) {
    if (grads.size() != m.layers.size()) {
        throw shape_error("apply_gradients: layer count mismatch");
    }
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        conv_layer& l = m.layers[i];
        adam_step(l.k, grads[i].k, l.st_k, l.name + ".k");
        adam_step(l.b, grads[i].b, l.st_b, l.name + ".b");
    }
}

struct training_pair {
    tensor4f input;  // (1, c, s, s)
    tensor4f target; // (1, 1, s, s), values in [0, 1]
};

using training_set = std::vector<training_pair>;

namespace detail {

inline tensor4f stack_batch(const training_set& data, const std::vector<std::size_t>& order,
                            std::size_t begin, std::size_t end, bool targets) {
    const tensor4f& first = targets ? data[order[begin]].target : data[order[begin]].input;
    tensor4f batch(static_cast<int>(end - begin), first.c, first.h, first.w);
    const std::size_t stride = first.size();
    for (std::size_t i = begin; i < end; ++i) {
        const tensor4f& s = targets ? data[order[i]].target : data[order[i]].input;
        if (s.n != 1 || !s.same_shape(first)) {
            throw shape_error("train: inconsistent sample shapes in dataset");
        }
        std::copy_n(s.data.begin(), stride,
                    batch.data.begin() + static_cast<std::ptrdiff_t>((i - begin) * stride));
    }
    return batch;
}

} // namespace detail

// One seeded-shuffle pass over the dataset; returns the per-element mean loss
// (batch losses weighted by batch size).
inline double train_epoch(unet_model& m, const training_set& data, std::uint64_t shuffle_seed) {
    if (data.empty()) {
        throw degenerate_input_error("train_epoch: empty dataset");
    }
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_stream rng(shuffle_seed, "shuffle");
    rng.shuffle(order);

    const std::size_t bs = static_cast<std::size_t>(m.config.batch_size);
    double loss_sum = 0.0;
    std::size_t n_seen = 0, batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs, ++batch_index) {
        const std::size_t end = std::min(begin + bs, order.size());
        const tensor4f x = detail::stack_batch(data, order, begin, end, false);
        const tensor4f y = detail::stack_batch(data, order, begin, end, true);
        backprop_result r = backprop(m, x, y);
        if (!std::isfinite(r.loss)) {
            char msg[128];
            std::snprintf(msg, sizeof(msg), "train_epoch: non-finite loss at batch %zu (value %g)",
                          batch_index, r.loss);
            throw numeric_error(msg);
        }
        apply_gradients(m, r.grads);
        loss_sum += r.loss * static_cast<double>(end - begin);
        n_seen += end - begin;
    }
    return loss_sum / static_cast<double>(n_seen);
}

// Full training run driven by config.epochs; shuffle seeds derive from the
// model's seed and the epoch index. Returns the loss history.
inline std::vector<double> train_unet(unet_model& m, const training_set& data) {
    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(m.config.epochs));
    for (int e = 0; e < m.config.epochs; ++e) {
        history.push_back(
            train_epoch(m, data, derive_seed(m.config.seed, "shuffle", static_cast<std::uint64_t>(e))));
    }
    return history;
}

// ---------------------------------------------------------------------------
// Checkpoints: <prefix>.json manifest + <prefix>.bin little-endian blob.
// Blob layout per layer: kernel f32, bias f32, then Adam moments (m, v) as
// f64 for kernel and bias. Roundtrip is bit-exact, including optimizer state.
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const unet_config& c) {
    j = nlohmann::json{{"input_size", c.input_size},
                       {"in_channels", c.in_channels},
                       {"depth", c.depth},
                       {"base_channels", c.base_channels},
                       {"channel_growth", c.channel_growth},
                       {"loss", to_string(c.loss)},
                       {"w_pos", c.w_pos},
                       {"lr", c.lr},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, unet_config& c) {
    c.input_size = j.at("input_size").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.depth = j.at("depth").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_growth = j.at("channel_growth").get<double>();
    c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
    c.w_pos = j.at("w_pos").get<double>();
    c.lr = j.at("lr").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
}

namespace detail {

inline std::size_t layer_blob_bytes(const conv_layer& l) {
    return 4 * (l.k.data.size() + l.b.size()) + 8 * 2 * (l.k.data.size() + l.b.size());
}

template <typename T>
void write_raw(std::ofstream& out, const std::vector<T>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_raw(std::ifstream& in, std::vector<T>& v) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

} // namespace detail

inline void save_checkpoint(const unet_model& m, const std::filesystem::path& prefix) {
    std::size_t blob_bytes = 0;
    nlohmann::json layers = nlohmann::json::array();
    for (const conv_layer& l : m.layers) {
        layers.push_back(nlohmann::json{{"name", l.name},
                                        {"out_channels", l.k.n},
                                        {"in_channels", l.k.c},
                                        {"adam_t", {l.st_k.t, l.st_b.t}}});
        blob_bytes += detail::layer_blob_bytes(l);
    }
    nlohmann::json manifest{{"format_version", 1},
                            {"config", m.config},
                            {"layers", layers},
                            {"blob_bytes", blob_bytes}};

    const std::filesystem::path json_path = prefix.string() + ".json";
    const std::filesystem::path bin_path = prefix.string() + ".bin";
    if (prefix.has_parent_path()) {
        std::filesystem::create_directories(prefix.parent_path());
    }
    std::ofstream jout(json_path);
    if (!jout) throw io_error("cannot write " + json_path.string());
    jout << manifest.dump(2) << "\n";
    jout.close();
    if (!jout) throw io_error("failed writing " + json_path.string());

    std::ofstream bout(bin_path, std::ios::binary);
    if (!bout) throw io_error("cannot write " + bin_path.string());
    for (const conv_layer& l : m.layers) {
        detail::write_raw(bout, l.k.data);
        detail::write_raw(bout, l.b);
        detail::write_raw(bout, l.st_k.m);
        detail::write_raw(bout, l.st_k.v);
        detail::write_raw(bout, l.st_b.m);
        detail::write_raw(bout, l.st_b.v);
    }
    bout.close();
    if (!bout) throw io_error("failed writing " + bin_path.string());
}

inline unet_model load_checkpoint(const std::filesystem::path& prefix) {
    const std::filesystem::path json_path = prefix.string() + ".json";
    const std::filesystem::path bin_path = prefix.string() + ".bin";
    std::ifstream jin(json_path);
    if (!jin) throw io_error("cannot open checkpoint manifest " + json_path.string());
    nlohmann::json manifest;
    try {
        jin >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("invalid checkpoint manifest " + json_path.string() + ": " + e.what());
    }
    int version = 0;
    try {
        version = manifest.at("format_version").get<int>();
    } catch (const nlohmann::json::exception&) {
        throw format_error("checkpoint manifest missing format_version");
    }
    if (version != 1) {
        throw unsupported_error("checkpoint format_version " + std::to_string(version) +
                                " not supported");
    }

    unet_model m;
    std::size_t expected_bytes = 0;
    try {
        unet_config cfg = manifest.at("config").get<unet_config>();
        m = detail::make_skeleton(cfg);
        const auto& layers = manifest.at("layers");
        if (layers.size() != m.layers.size()) {
            throw corruption_error("checkpoint layer count " + std::to_string(layers.size()) +
                                   " does not match config-derived " +
                                   std::to_string(m.layers.size()));
        }
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            const auto& e = layers[i];
            if (e.at("out_channels").get<int>() != m.layers[i].k.n ||
                e.at("in_channels").get<int>() != m.layers[i].k.c) {
                throw corruption_error("checkpoint layer " + m.layers[i].name +
                                       " shape disagrees with config");
            }
            m.layers[i].st_k.t = e.at("adam_t").at(0).get<std::int64_t>();
            m.layers[i].st_b.t = e.at("adam_t").at(1).get<std::int64_t>();
            expected_bytes += detail::layer_blob_bytes(m.layers[i]);
        }
        if (manifest.at("blob_bytes").get<std::size_t>() != expected_bytes) {
            throw corruption_error("checkpoint manifest blob_bytes disagrees with config shapes");
        }
    } catch (const nlohmann::json::exception& e) {
        throw format_error("invalid checkpoint manifest " + json_path.string() + ": " + e.what());
    }

    std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
    if (!bin) throw io_error("cannot open checkpoint blob " + bin_path.string());
    const std::size_t actual = static_cast<std::size_t>(bin.tellg());
    if (actual != expected_bytes) {
        throw corruption_error("checkpoint blob " + bin_path.string() + " is " +
                               std::to_string(actual) + " bytes, expected " +
                               std::to_string(expected_bytes));
    }
    bin.seekg(0);
    for (conv_layer& l : m.layers) {
        detail::read_raw(bin, l.k.data);
        detail::read_raw(bin, l.b);
        detail::read_raw(bin, l.st_k.m);
        detail::read_raw(bin, l.st_k.v);
        detail::read_raw(bin, l.st_b.m);
        detail::read_raw(bin, l.st_b.v);
    }
    if (!bin) {
        throw corruption_error("checkpoint blob " + bin_path.string() + " truncated mid-read");
    }
    for (const conv_layer& l : m.layers) {
        l.k.require_finite(("checkpoint " + l.name).c_str());
    }
    return m;
}

} // namespace marrowcast
