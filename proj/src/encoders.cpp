#include "malm/encoders.hpp"

#include "malm/common.hpp"

namespace malm {

namespace {

torch::Tensor split_heads(const torch::Tensor& x, int64_t heads) {
    // B x N x D -> B x H x N x D/H
    int64_t B = x.size(0), N = x.size(1), D = x.size(2);
    return x.view({B, N, heads, D / heads}).permute({0, 2, 1, 3});
}

torch::Tensor merge_heads(const torch::Tensor& x) {
    // B x H x N x Dh -> B x N x D
    int64_t B = x.size(0), H = x.size(1), N = x.size(2), Dh = x.size(3);
    return x.permute({0, 2, 1, 3}).reshape({B, N, H * Dh});
}

}  // namespace

// ---------------------------------------------------------------- blocks --

SelfAttentionImpl::SelfAttentionImpl(int64_t dim, int64_t heads_) : heads(heads_) {
    check(dim % heads > 0 ? false : true, "hidden dim must be divisible by heads");
    qkv = register_module("qkv", torch::nn::Linear(dim, dim * 3));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
    int64_t D = x.size(2);
    auto chunks = qkv(x).chunk(3, -1);
    torch::Tensor q = split_heads(chunks[0], heads);
    torch::Tensor k = split_heads(chunks[1], heads);
    torch::Tensor v = split_heads(chunks[2], heads);
    double scale = 1.0 / std::sqrt(static_cast<double>(D / heads));
    torch::Tensor attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
    return proj(merge_heads(torch::matmul(attn, v)));
}

EncoderBlockImpl::EncoderBlockImpl(int64_t dim, int64_t heads) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", SelfAttention(dim, heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", torch::nn::Linear(dim, dim * 4));
    fc2 = register_module("fc2", torch::nn::Linear(dim * 4, dim));
}

torch::Tensor EncoderBlockImpl::forward(torch::Tensor x) {
    x = x + attn(norm1(x));
    x = x + fc2(torch::gelu(fc1(norm2(x))));
    return x;
}

TransformerStackImpl::TransformerStackImpl(int64_t dim, int64_t depth, int64_t heads,
                                           bool final_norm) {
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < depth; ++i) blocks->push_back(EncoderBlock(dim, heads));
    if (final_norm)
        norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor TransformerStackImpl::forward(torch::Tensor x) {
    for (const auto& block : *blocks) x = block->as<EncoderBlock>()->forward(x);
    if (norm) x = norm(x);
    return x;
}

CrossAttentionMHImpl::CrossAttentionMHImpl(int64_t dim, int64_t heads_) : heads(heads_) {
    check(dim % heads == 0, "hidden dim must be divisible by heads");
    to_q = register_module("to_q", torch::nn::Linear(dim, dim));
    to_kv = register_module("to_kv", torch::nn::Linear(dim, dim * 2));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor CrossAttentionMHImpl::forward(const torch::Tensor& x, const torch::Tensor& ctx) {
    int64_t D = x.size(2);
    torch::Tensor q = split_heads(to_q(x), heads);
    auto kv = to_kv(ctx).chunk(2, -1);
    torch::Tensor k = split_heads(kv[0], heads);
    torch::Tensor v = split_heads(kv[1], heads);
    double scale = 1.0 / std::sqrt(static_cast<double>(D / heads));
    torch::Tensor attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
    return proj(merge_heads(torch::matmul(attn, v)));
}

FusionLayerImpl::FusionLayerImpl(int64_t dim, int64_t heads) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    self_attn = register_module("self_attn", SelfAttention(dim, heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    cross_attn = register_module("cross_attn", CrossAttentionMH(dim, heads));
    norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", torch::nn::Linear(dim, dim * 4));
    fc2 = register_module("fc2", torch::nn::Linear(dim * 4, dim));
}

torch::Tensor FusionLayerImpl::forward(torch::Tensor x, const torch::Tensor& ctx) {
    x = x + self_attn(norm1(x));
    x = x + cross_attn(norm2(x), ctx);
    x = x + fc2(torch::gelu(fc1(norm3(x))));
    return x;
}

// --------------------------------------------------------- image encoder --

void ImageEncoderConfig::validate() const {
    check(image_size >= 1 && patch_size >= 1, "bad image/patch size");
    check(image_size % patch_size == 0, "image size must be divisible by patch size");
    check(hidden_dim % heads == 0, "hidden_dim must be divisible by heads");
    check(depth >= 1, "depth must be >= 1");
    check(channels == 1 || channels == 3, "channels must be 1 or 3");
}

ImageEncoderImpl::ImageEncoderImpl(const ImageEncoderConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    int64_t P = cfg.num_patches();
    patch_embed = register_module(
        "patch_embed",
        torch::nn::Linear(cfg.patch_size * cfg.patch_size * cfg.channels, cfg.hidden_dim));
    cls_token = register_parameter("cls_token", torch::randn({1, 1, cfg.hidden_dim}) * 0.02);
    pos_embed = register_parameter("pos_embed", torch::randn({1, 1 + P, cfg.hidden_dim}) * 0.02);
    stack = register_module("stack",
                            TransformerStack(cfg.hidden_dim, cfg.depth, cfg.heads, true));
}

torch::Tensor ImageEncoderImpl::patchify(const torch::Tensor& images) const {
    check(images.dim() == 4, "images must be B x C x H x W");
    int64_t B = images.size(0), C = images.size(1), H = images.size(2), W = images.size(3);
    check(C == cfg.channels, "unexpected channel count");
    check(H == W, "images must be square");
    check(H == cfg.image_size, "unexpected image size");
    int64_t g = H / cfg.patch_size, ps = cfg.patch_size;
    // row-major patch order: patch p covers rows [p/g*ps, ...), cols [p%g*ps, ...)
    torch::Tensor x = images.reshape({B, C, g, ps, g, ps});
    x = x.permute({0, 2, 4, 1, 3, 5});
    return x.reshape({B, g * g, C * ps * ps});
}

torch::Tensor ImageEncoderImpl::run(torch::Tensor tokens_with_cls) {
    return stack(tokens_with_cls);
}

torch::Tensor ImageEncoderImpl::encode_full(const torch::Tensor& images) {
    torch::Tensor tokens = patch_embed(patchify(images));
    tokens = tokens + pos_embed.index({torch::indexing::Slice(), torch::indexing::Slice(1)});
    torch::Tensor cls = (cls_token + pos_embed.index({torch::indexing::Slice(),
                                                      torch::indexing::Slice(0, 1)}))
                            .expand({tokens.size(0), 1, cfg.hidden_dim});
    return run(torch::cat({cls, tokens}, 1));
}

torch::Tensor ImageEncoderImpl::encode_visible(const torch::Tensor& images,
                                               const MaskSpec& mask) {
    int64_t P = cfg.num_patches();
    check(mask.num_positions == P, "mask was sampled for a different patch count");
    torch::Tensor tokens = patch_embed(patchify(images));
    tokens = tokens + pos_embed.index({torch::indexing::Slice(), torch::indexing::Slice(1)});
    torch::Tensor vis = mask.visible_patches();  // B x V, 0-based
    torch::Tensor visible = torch::gather(
        tokens, 1, vis.unsqueeze(-1).expand({tokens.size(0), vis.size(1), cfg.hidden_dim}));
    torch::Tensor cls = (cls_token + pos_embed.index({torch::indexing::Slice(),
                                                      torch::indexing::Slice(0, 1)}))
                            .expand({tokens.size(0), 1, cfg.hidden_dim});
    return run(torch::cat({cls, visible}, 1));
}

// -------------------------------------------------------- recipe encoder --

void RecipeEncoderConfig::validate() const {
    check(vocab_size >= 2, "vocab_size must cover [PAD] and [UNK]");
    check(hidden_dim % component_heads == 0, "hidden_dim must be divisible by heads");
    check(hidden_dim % fusion_heads == 0, "hidden_dim must be divisible by fusion heads");
    check(component_depth >= 1 && fusion_depth >= 1, "depths must be >= 1");
    check(caps.title >= 1 && caps.ingredients >= 1 && caps.instructions >= 1,
          "component caps must be >= 1");
}

RecipeEncoderImpl::RecipeEncoderImpl(const RecipeEncoderConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    token_embed = register_module("token_embed",
                                  torch::nn::Embedding(cfg.vocab_size, cfg.hidden_dim));
    torch::nn::init::normal_(token_embed->weight, 0.0, 0.02);
    mask_token = register_parameter("mask_token", torch::randn({cfg.hidden_dim}) * 0.02);

    const char* names[3] = {"title", "ingredients", "instructions"};
    int64_t caps[3] = {cfg.caps.title, cfg.caps.ingredients, cfg.caps.instructions};
    for (int c = 0; c < 3; ++c) {
        pos_embed[c] = register_parameter(std::string(names[c]) + "_pos",
                                          torch::randn({caps[c], cfg.hidden_dim}) * 0.02);
        component[c] = register_module(
            std::string(names[c]) + "_encoder",
            TransformerStack(cfg.hidden_dim, cfg.component_depth, cfg.component_heads, true));
        fusion[c] = register_module(std::string(names[c]) + "_fusion", torch::nn::ModuleList());
        for (int64_t d = 0; d < cfg.fusion_depth; ++d)
            fusion[c]->push_back(FusionLayer(cfg.hidden_dim, cfg.fusion_heads));
        fusion_norm[c] = register_module(
            std::string(names[c]) + "_fusion_norm",
            torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.hidden_dim})));
    }
}

torch::Tensor RecipeEncoderImpl::embed_component(int comp, const torch::Tensor& ids,
                                                 const MaskSpec* token_mask, int64_t offset) {
    torch::Tensor x = token_embed(ids);
    if (token_mask) {
        // replace masked token embeddings that fall into this component's
        // slice of the fused sequence; mask positions are 1-based over S
        int64_t cap = ids.size(1);
        auto acc = token_mask->seq_positions.accessor<int64_t, 2>();
        std::vector<torch::Tensor> rows, cols;
        for (int64_t b = 0; b < token_mask->batch(); ++b)
            for (int64_t j = 0; j < token_mask->count(); ++j) {
                int64_t pos = acc[b][j] - 1 - offset;  // 0-based within component
                if (pos >= 0 && pos < cap) {
                    rows.push_back(torch::tensor(b, torch::kInt64));
                    cols.push_back(torch::tensor(pos, torch::kInt64));
                }
            }
        if (!rows.empty()) {
            torch::Tensor r = torch::stack(rows), c = torch::stack(cols);
            torch::Tensor expanded =
                mask_token.view({1, cfg.hidden_dim}).expand({r.size(0), cfg.hidden_dim});
            x = x.index_put({r, c}, expanded);
        }
    }
    if (cfg.use_positional[static_cast<size_t>(comp)])
        x = x + pos_embed[comp].unsqueeze(0);
    return component[comp](x);
}

torch::Tensor RecipeEncoderImpl::forward(const torch::Tensor& title_ids,
                                         const torch::Tensor& ingredient_ids,
                                         const torch::Tensor& instruction_ids,
                                         const MaskSpec* token_mask) {
    check(title_ids.size(1) == cfg.caps.title &&
              ingredient_ids.size(1) == cfg.caps.ingredients &&
              instruction_ids.size(1) == cfg.caps.instructions,
          "component length != cap; truncation happens upstream, never here");

    int64_t off_title = 0;
    int64_t off_ingr = cfg.caps.title;
    int64_t off_instr = cfg.caps.title + cfg.caps.ingredients;
    torch::Tensor t = embed_component(0, title_ids, token_mask, off_title);
    torch::Tensor g = embed_component(1, ingredient_ids, token_mask, off_ingr);
    torch::Tensor n = embed_component(2, instruction_ids, token_mask, off_instr);

    // every component cross-attends to the other two
    torch::Tensor ctx_t = torch::cat({g, n}, 1);
    torch::Tensor ctx_g = torch::cat({t, n}, 1);
    torch::Tensor ctx_n = torch::cat({t, g}, 1);
    torch::Tensor ft = t, fg = g, fn = n;
    for (const auto& layer : *fusion[0]) ft = layer->as<FusionLayer>()->forward(ft, ctx_t);
    for (const auto& layer : *fusion[1]) fg = layer->as<FusionLayer>()->forward(fg, ctx_g);
    for (const auto& layer : *fusion[2]) fn = layer->as<FusionLayer>()->forward(fn, ctx_n);
    ft = fusion_norm[0](ft);
    fg = fusion_norm[1](fg);
    fn = fusion_norm[2](fn);
    return torch::cat({ft, fg, fn}, 1);
}

// ------------------------------------------------------------ projection --

ProjectionImpl::ProjectionImpl(int64_t in_dim_, int64_t out_dim_)
    : in_dim(in_dim_), out_dim(out_dim_) {
    linear = register_module("linear", torch::nn::Linear(in_dim, out_dim));
}

torch::Tensor ProjectionImpl::forward(const torch::Tensor& x) {
    check(x.size(-1) == in_dim, "projection input dim mismatch: got " +
                                    std::to_string(x.size(-1)) + ", expected " +
                                    std::to_string(in_dim));
    return linear(x);
}

void copy_parameters(const torch::nn::Module& src, torch::nn::Module& dst) {
    torch::NoGradGuard no_grad;
    auto src_params = src.named_parameters(true);
    auto dst_params = dst.named_parameters(true);
    check(src_params.size() == dst_params.size(), "parameter trees differ in size");
    for (const auto& item : src_params) {
        torch::Tensor* target = dst_params.find(item.key());
        check(target != nullptr, "missing parameter in destination: " + item.key());
        check(target->sizes() == item.value().sizes(),
              "parameter shape mismatch: " + item.key());
        target->copy_(item.value());
    }
}

}  // namespace malm
