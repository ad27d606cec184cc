#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sarwsl/autodiff/init.hpp"
#include "sarwsl/autodiff/ops.hpp"
#include "sarwsl/binary_io.hpp"
#include "sarwsl/random.hpp"

namespace sarwsl {

enum class SkipMode : std::uint32_t { concat = 0, add = 1 };

/// Encoder-decoder shape. Encoder level i has base_filters * width_multipliers[i]
/// channels; the bottleneck has base_filters * bottleneck_multiplier.
struct UnetConfig {
    std::size_t depth = 5;
    std::size_t base_filters = 32;
    std::vector<std::size_t> width_multipliers{1, 2, 4, 8, 16};
    std::size_t bottleneck_multiplier = 32;
    double dropout_rate = 0.5;
    SkipMode skip_mode = SkipMode::concat;
    std::size_t input_channels = 2;
    std::size_t output_channels = 1;
    ad::InitScheme init = ad::InitScheme::he;

    /// 32 filters, five levels at x1..x16 and a x32 (1024-channel) bottleneck.
    static UnetConfig full() { return {}; }

    /// Desk-scale variant used by tests and the benchmark.
    static UnetConfig tiny()
    {
        UnetConfig c;
        c.depth = 3;
        c.base_filters = 8;
        c.width_multipliers = {1, 2, 4};
        c.bottleneck_multiplier = 8;
        return c;
    }

    std::size_t level_width(std::size_t level) const { return base_filters * width_multipliers.at(level); }
    std::size_t bottleneck_width() const { return base_filters * bottleneck_multiplier; }
    std::size_t side_multiple() const { return std::size_t{1} << depth; }

    void validate() const
    {
        if (depth < 1)
            throw std::invalid_argument("unet: depth must be >= 1");
        if (width_multipliers.size() != depth)
            throw std::invalid_argument("unet: width_multipliers must have one entry per level");
        if (base_filters < 1 || bottleneck_multiplier < 1 || input_channels < 1 || output_channels < 1)
            throw std::invalid_argument("unet: widths and channel counts must be positive");
        for (std::size_t m : width_multipliers)
            if (m < 1)
                throw std::invalid_argument("unet: width multipliers must be positive");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw std::invalid_argument("unet: dropout_rate must lie in [0, 1)");
    }

    bool operator==(const UnetConfig&) const = default;
};

enum class ParamKind : std::uint8_t { kernel, bias, bn_gamma, bn_beta, bn_mean, bn_var };

template <typename T>
struct Parameter {
    std::string name;
    ParamKind kind;
    ad::Tensor<T> tensor;

    bool trainable() const { return kind != ParamKind::bn_mean && kind != ParamKind::bn_var; }
    /// Weight decay applies to kernels only.
    bool decays() const { return kind == ParamKind::kernel; }
};

/// Ordered, uniquely named parameter tensors.
template <typename T>
class ParameterSet {
public:
    std::size_t add(std::string name, ParamKind kind, ad::Tensor<T> tensor)
    {
        if (index_.count(name))
            throw std::logic_error("duplicate parameter name " + name);
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), kind, std::move(tensor)});
        return entries_.size() - 1;
    }

    std::size_t index_of(const std::string& name) const
    {
        const auto it = index_.find(name);
        if (it == index_.end())
            throw std::out_of_range("no parameter named " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Parameter<T>& operator[](std::size_t i) { return entries_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return entries_[i]; }
    Parameter<T>& at(const std::string& name) { return entries_[index_of(name)]; }
    const Parameter<T>& at(const std::string& name) const { return entries_[index_of(name)]; }
    std::size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& p : entries_)
            n += p.tensor.size();
        return n;
    }

    template <typename U>
    ParameterSet<U> cast() const
    {
        ParameterSet<U> out;
        for (const auto& p : entries_)
            out.add(p.name, p.kind, p.tensor.template cast<U>());
        return out;
    }

    bool operator==(const ParameterSet& o) const
    {
        if (entries_.size() != o.entries_.size())
            return false;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name != o.entries_[i].name || entries_[i].kind != o.entries_[i].kind ||
                !(entries_[i].tensor == o.entries_[i].tensor))
                return false;
        return true;
    }

private:
    std::vector<Parameter<T>> entries_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
struct Model {
    UnetConfig config;
    ParameterSet<T> params;
};

namespace detail {

// conv3x3 -> BN -> ReLU; the conv has no bias since BN's shift subsumes it.
template <typename T>
void add_conv_block(ParameterSet<T>& ps, const UnetConfig& cfg, const std::string& prefix, std::size_t cin,
                    std::size_t cout, std::uint64_t seed)
{
    ps.add(prefix + ".kernel", ParamKind::kernel, ad::kernel_init<T>(cfg.init, {3, 3, cin, cout}, substream(seed, prefix)));
    ps.add(prefix + ".bn.gamma", ParamKind::bn_gamma, ad::Tensor<T>({cout}, T(1)));
    ps.add(prefix + ".bn.beta", ParamKind::bn_beta, ad::Tensor<T>({cout}, T(0)));
    ps.add(prefix + ".bn.mean", ParamKind::bn_mean, ad::Tensor<T>({cout}, T(0)));
    ps.add(prefix + ".bn.var", ParamKind::bn_var, ad::Tensor<T>({cout}, T(1)));
}

inline std::string level_name(const char* stage, std::size_t level)
{
    return std::string(stage) + std::to_string(level);
}

} // namespace detail

/// Allocates every layer's parameters; kernels are drawn from per-name
/// substreams of `seed`, biases and BN shifts start at zero, BN scales at one.
template <typename T>
Model<T> build(const UnetConfig& config, std::uint64_t seed)
{
    config.validate();
    Model<T> model{config, {}};
    auto& ps = model.params;
    std::size_t cin = config.input_channels;
    for (std::size_t i = 0; i < config.depth; ++i) {
        const std::size_t w = config.level_width(i);
        detail::add_conv_block(ps, config, detail::level_name("enc", i) + ".conv1", cin, w, seed);
        detail::add_conv_block(ps, config, detail::level_name("enc", i) + ".conv2", w, w, seed);
        cin = w;
    }
    const std::size_t wb = config.bottleneck_width();
    detail::add_conv_block(ps, config, "bottleneck.conv1", cin, wb, seed);
    detail::add_conv_block(ps, config, "bottleneck.conv2", wb, wb, seed);
    cin = wb;
    for (std::size_t i = config.depth; i-- > 0;) {
        const std::size_t w = config.level_width(i);
        const std::string prefix = detail::level_name("dec", i);
        ps.add(prefix + ".up.kernel", ParamKind::kernel,
               ad::kernel_init<T>(config.init, {2, 2, cin, w}, substream(seed, prefix + ".up")));
        const std::size_t merged = config.skip_mode == SkipMode::concat ? 2 * w : w;
        detail::add_conv_block(ps, config, prefix + ".conv1", merged, w, seed);
        detail::add_conv_block(ps, config, prefix + ".conv2", w, w, seed);
        cin = w;
    }
    ps.add("head.kernel", ParamKind::kernel,
           ad::kernel_init<T>(config.init, {1, 1, cin, config.output_channels}, substream(seed, "head")));
    ps.add("head.bias", ParamKind::bias, ad::bias_init<T>(config.output_channels));
    return model;
}

/// Binds each trainable parameter to a tape variable; slot i holds the
/// variable for params[i] (invalid for running statistics).
template <typename T>
std::vector<ad::Var> bind_parameters(const ParameterSet<T>& params, ad::Tape<T>& tape, bool differentiable)
{
    std::vector<ad::Var> vars(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].trainable())
            vars[i] = differentiable ? tape.variable(params[i].tensor) : tape.constant(params[i].tensor);
    return vars;
}

/// Records the network on `tape` and returns the sigmoid probabilities.
/// In training mode batch statistics are used and, when `stats_out` is given,
/// the updated running statistics are written there; dropout masks derive
/// from `dropout_seed`.
template <typename T>
ad::Var forward_graph(const UnetConfig& config, const ParameterSet<T>& params, std::span<const ad::Var> bound,
                      ad::Tape<T>& tape, ad::Var input, bool training, std::uint64_t dropout_seed,
                      ParameterSet<T>* stats_out = nullptr)
{
    const ad::Shape& in = tape.shape(input);
    if (in.size() != 4 || in[3] != config.input_channels)
        throw std::invalid_argument("unet forward: expected N x H x W x " + std::to_string(config.input_channels) +
                                    " input, got " + ad::to_string(in));
    if (in[1] % config.side_multiple() != 0 || in[2] % config.side_multiple() != 0)
        throw std::invalid_argument("unet forward: spatial size " + std::to_string(in[1]) + "x" +
                                    std::to_string(in[2]) + " not divisible by 2^depth = " +
                                    std::to_string(config.side_multiple()));

    const auto var = [&](const std::string& name) { return bound[params.index_of(name)]; };
    std::uint64_t dropout_layer = 0;
    const auto drop = [&](ad::Var x) {
        return ad::dropout(tape, x, config.dropout_rate, training, substream(dropout_seed, {dropout_layer++}));
    };
    const auto block = [&](ad::Var x, const std::string& prefix) {
        const ad::Var conv = ad::conv2d(tape, x, var(prefix + ".kernel"));
        ad::BatchNormState<T> state;
        state.running_mean = params.at(prefix + ".bn.mean").tensor.values;
        state.running_var = params.at(prefix + ".bn.var").tensor.values;
        const ad::Var bn = ad::batch_norm(tape, conv, var(prefix + ".bn.gamma"), var(prefix + ".bn.beta"), state, training);
        if (training && stats_out) {
            stats_out->at(prefix + ".bn.mean").tensor.values = state.running_mean;
            stats_out->at(prefix + ".bn.var").tensor.values = state.running_var;
        }
        return ad::relu(tape, bn);
    };

    std::vector<ad::Var> skips;
    ad::Var x = input;
    for (std::size_t i = 0; i < config.depth; ++i) {
        const std::string prefix = detail::level_name("enc", i);
        x = block(block(x, prefix + ".conv1"), prefix + ".conv2");
        skips.push_back(x);
        x = drop(ad::max_pool2(tape, x));
    }
    x = block(block(x, "bottleneck.conv1"), "bottleneck.conv2");
    for (std::size_t i = config.depth; i-- > 0;) {
        const std::string prefix = detail::level_name("dec", i);
        const ad::Var up = ad::conv2d_transpose(tape, x, var(prefix + ".up.kernel"));
        const ad::Var merged = config.skip_mode == SkipMode::concat ? ad::concat_channels(tape, skips[i], up)
                                                                    : ad::add(tape, skips[i], up);
        x = drop(block(block(merged, prefix + ".conv1"), prefix + ".conv2"));
    }
    return ad::sigmoid(tape, ad::conv2d(tape, x, var("head.kernel"), var("head.bias")));
}

/// Inference-mode probabilities for an N x H x W x C batch.
template <typename T>
ad::Tensor<T> predict(const Model<T>& model, const ad::Tensor<T>& inputs)
{
    ad::Tape<T> tape;
    const auto bound = bind_parameters(model.params, tape, false);
    const ad::Var out = forward_graph(model.config, model.params, bound, tape, tape.constant(inputs), false, 0);
    return tape.value(out);
}

// WSLM layout, little-endian:
//   "WSLM" | u16 version=1
//   | config: u32 depth, u32 base_filters, u32 multipliers[depth], u32 bottleneck_multiplier,
//             u32 dropout_rate (IEEE-754 f32 bit pattern), u32 skip_mode, u32 input_channels,
//             u32 output_channels, u32 init_scheme
//   | u32 tensor_count | per tensor: u32 name_len, name, u32 rank, u32 dims[rank], f32 payload
inline constexpr std::uint16_t kWslmVersion = 1;

inline std::vector<char> encode_checkpoint(const Model<float>& model)
{
    const UnetConfig& c = model.config;
    ByteWriter w;
    w.bytes("WSLM");
    w.u16(kWslmVersion);
    w.u32(static_cast<std::uint32_t>(c.depth));
    w.u32(static_cast<std::uint32_t>(c.base_filters));
    for (std::size_t m : c.width_multipliers)
        w.u32(static_cast<std::uint32_t>(m));
    w.u32(static_cast<std::uint32_t>(c.bottleneck_multiplier));
    w.f32(static_cast<float>(c.dropout_rate));
    w.u32(static_cast<std::uint32_t>(c.skip_mode));
    w.u32(static_cast<std::uint32_t>(c.input_channels));
    w.u32(static_cast<std::uint32_t>(c.output_channels));
    w.u32(static_cast<std::uint32_t>(c.init));
    w.u32(static_cast<std::uint32_t>(model.params.size()));
    for (const auto& p : model.params) {
        w.u32(static_cast<std::uint32_t>(p.name.size()));
        w.bytes(p.name);
        w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
        for (std::size_t d : p.tensor.shape)
            w.u32(static_cast<std::uint32_t>(d));
        w.f32s(p.tensor.data(), p.tensor.size());
    }
    return w.buffer();
}

inline Model<float> decode_checkpoint(ByteReader in)
{
    if (in.remaining() < 4 || in.bytes(4) != "WSLM")
        throw FormatError(in.what() + ": bad magic (expected WSLM)");
    const std::uint16_t version = in.u16();
    if (version != kWslmVersion)
        throw FormatError(in.what() + ": unsupported WSLM version " + std::to_string(version));
    UnetConfig c;
    c.depth = in.u32();
    if (c.depth < 1 || c.depth > 16)
        throw FormatError(in.what() + ": implausible depth " + std::to_string(c.depth));
    c.base_filters = in.u32();
    c.width_multipliers.assign(c.depth, 0);
    for (auto& m : c.width_multipliers)
        m = in.u32();
    c.bottleneck_multiplier = in.u32();
    c.dropout_rate = in.f32();
    const std::uint32_t skip = in.u32();
    if (skip > 1)
        throw FormatError(in.what() + ": unknown skip mode");
    c.skip_mode = static_cast<SkipMode>(skip);
    c.input_channels = in.u32();
    c.output_channels = in.u32();
    const std::uint32_t init = in.u32();
    if (init > 1)
        throw FormatError(in.what() + ": unknown init scheme");
    c.init = static_cast<ad::InitScheme>(init);
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(in.what() + ": invalid config block (" + e.what() + ")");
    }

    Model<float> model{c, {}};
    // Template carries the expected names, kinds and shapes for this config.
    const Model<float> expected = build<float>(c, 0);
    const std::uint32_t count = in.u32();
    if (count != expected.params.size())
        throw FormatError(in.what() + ": tensor count " + std::to_string(count) + " does not match config (" +
                          std::to_string(expected.params.size()) + ")");
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t name_len = in.u32();
        if (name_len > 256)
            throw FormatError(in.what() + ": implausible tensor name length");
        const std::string name = in.bytes(name_len);
        if (!expected.params.contains(name) || expected.params.index_of(name) != k)
            throw FormatError(in.what() + ": unexpected tensor '" + name + "' at position " + std::to_string(k));
        const auto& proto = expected.params[k];
        const std::uint32_t rank = in.u32();
        if (rank != proto.tensor.rank())
            throw FormatError(in.what() + ": rank mismatch for " + name);
        ad::Shape shape(rank);
        for (auto& d : shape)
            d = in.u32();
        if (shape != proto.tensor.shape)
            throw FormatError(in.what() + ": shape mismatch for " + name + " (file " + ad::to_string(shape) +
                              ", config " + ad::to_string(proto.tensor.shape) + ")");
        ad::Tensor<float> t(shape);
        in.f32s(t.data(), t.size());
        model.params.add(name, proto.kind, std::move(t));
    }
    if (in.remaining() != 0)
        throw FormatError(in.what() + ": trailing bytes after last tensor");
    return model;
}

inline void save_checkpoint(const Model<float>& model, const std::filesystem::path& path)
{
    const auto bytes = encode_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw std::runtime_error("write failed: " + path.string());
}

inline Model<float> load_checkpoint(const std::filesystem::path& path)
{
    return decode_checkpoint(ByteReader::from_file(path));
}

} // namespace sarwsl
