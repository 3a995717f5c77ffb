#include "malm/model.hpp"

#include "malm/common.hpp"

namespace malm {

ModelConfig ModelConfig::from_run_config(const RunConfig& cfg, int64_t vocab_size) {
    ModelConfig m;
    m.image.image_size = cfg.get_int("image_size");
    m.image.patch_size = cfg.get_int("image_patch_size");
    m.image.channels = cfg.get_int("image_channels");
    m.image.hidden_dim = cfg.get_int("image_hidden");
    m.image.depth = cfg.get_int("image_depth");
    m.image.heads = cfg.get_int("image_heads");

    m.recipe.vocab_size = vocab_size;
    m.recipe.hidden_dim = cfg.get_int("recipe_component_hidden");
    m.recipe.component_depth = cfg.get_int("recipe_component_depth");
    m.recipe.component_heads = cfg.get_int("recipe_component_heads");
    m.recipe.fusion_depth = cfg.get_int("recipe_fusion_depth");
    m.recipe.fusion_heads = cfg.get_int("recipe_fusion_heads");
    m.recipe.caps.title = cfg.get_int("cap_title");
    m.recipe.caps.ingredients = cfg.get_int("cap_ingredients");
    m.recipe.caps.instructions = cfg.get_int("cap_instructions");

    m.shared_dim = cfg.get_int("shared_dim");

    m.matching.depth = cfg.get_int("matching_depth");
    m.matching.heads = cfg.get_int("matching_heads");
    m.matching.temperature_init = cfg.get_real("temperature_init");
    m.matching.normalize = cfg.get_bool("normalize_features");
    m.matching.literal_eq7_denominator = cfg.get_bool("literal_eq7_denominator");
    m.matching.literal_sum_loss = cfg.get_bool("literal_sum_loss");
    m.matching.include_cls_in_local = cfg.get_bool("include_cls_in_local");

    m.distill.beta = cfg.get_real("beta");
    m.distill.ema_momentum = cfg.get_real("ema_momentum");
    m.distill.depth = cfg.get_int("recon_depth");
    m.distill.heads = cfg.get_int("recon_heads");

    m.mask_ratio = cfg.get_real("mask_ratio");
    m.mask_recipe = cfg.get_bool("mask_recipe");
    return m;
}

void ModelConfig::validate() const {
    image.validate();
    recipe.validate();
    distill.validate();
    check(shared_dim >= 1, "shared_dim must be >= 1");
    check(shared_dim % matching.heads == 0, "shared_dim must be divisible by matching heads");
    check(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask_ratio must lie in [0, 1)");
}

MalmModelImpl::MalmModelImpl(const ModelConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    student = register_module("student", ImageEncoder(cfg.image));
    teacher = register_module("teacher", ImageEncoder(cfg.image));
    recipe = register_module("recipe", RecipeEncoder(cfg.recipe));
    proj_image = register_module("proj_image", Projection(cfg.image.hidden_dim, cfg.shared_dim));
    proj_recipe = register_module("proj_recipe",
                                  Projection(cfg.recipe.hidden_dim, cfg.shared_dim));
    assembler = register_module("assembler",
                                MaskAssembler(cfg.image.num_patches(), cfg.shared_dim));
    matching = register_module("matching", MatchingHead(cfg.shared_dim, cfg.matching));
    recon = register_module("recon", ReconstructionHead(cfg.shared_dim, cfg.distill.depth,
                                                        cfg.distill.heads));
    if (cfg.mask_recipe) {
        teacher_recipe = register_module("teacher_recipe", RecipeEncoder(cfg.recipe));
        recipe_recon = register_module(
            "recipe_recon",
            ReconstructionHead(cfg.shared_dim, cfg.distill.depth, cfg.distill.heads));
    }
    init_teacher();
}

void MalmModelImpl::init_teacher() {
    copy_parameters(*student, *teacher);
    for (auto& p : teacher->parameters()) p.set_requires_grad(false);
    if (teacher_recipe) {
        copy_parameters(*recipe, *teacher_recipe);
        for (auto& p : teacher_recipe->parameters()) p.set_requires_grad(false);
    }
}

StepOutputs MalmModelImpl::forward_train(const PairedBatch& batch, const MaskSpec& mask,
                                         const MaskSpec* recipe_mask, double triplet_margin) {
    StepOutputs out;

    // student sees only CLS + visible patches; projection to the shared dim
    torch::Tensor visible = proj_image(student->encode_visible(batch.images, mask));
    out.image_tokens = assembler->assemble(visible, mask);

    // teacher targets: full image through the frozen twin, projected through
    // the (gradient-stopped) student projection
    {
        torch::NoGradGuard no_grad;
        out.teacher_targets = proj_image(teacher->encode_full(batch.images)).detach();
    }

    const MaskSpec* rmask = (cfg.mask_recipe && recipe_mask) ? recipe_mask : nullptr;
    out.recipe_tokens = proj_recipe(
        recipe->forward(batch.title_ids, batch.ingredient_ids, batch.instruction_ids, rmask));

    out.match = matching->forward(out.image_tokens, out.recipe_tokens);
    auto [image_global, recipe_global] = global_features(out.match);
    out.losses.gc = matching->global_loss(image_global, recipe_global);
    torch::Tensor local = local_recipe_features(out.match.image_attention,
                                                out.match.recipe_features);
    out.losses.lc = matching->local_loss(out.match.image_features, local);

    out.reconstructed = recon(out.image_tokens);
    out.losses.dist = distillation_loss(out.reconstructed, out.teacher_targets, mask,
                                        cfg.distill.beta);
    if (rmask) {
        torch::Tensor rec_targets;
        {
            torch::NoGradGuard no_grad;
            rec_targets = proj_recipe(teacher_recipe->forward(batch.title_ids,
                                                              batch.ingredient_ids,
                                                              batch.instruction_ids))
                              .detach();
        }
        // recipe sequences have no CLS slot; prepend a zero row so the
        // 1-based mask positions line up with the image-side convention
        torch::Tensor pred = recipe_recon(out.recipe_tokens);
        torch::Tensor zeros = torch::zeros({pred.size(0), 1, pred.size(2)});
        out.losses.dist = out.losses.dist +
                          distillation_loss(torch::cat({zeros, pred}, 1),
                                            torch::cat({zeros, rec_targets}, 1), *rmask,
                                            cfg.distill.beta);
    }

    // triplet inputs are the encoder globals, not the cross-attended features
    torch::Tensor image_cls = out.image_tokens.index(
        {torch::indexing::Slice(), 0, torch::indexing::Slice()});
    torch::Tensor recipe_pooled = out.recipe_tokens.mean(1);
    out.losses.itc = triplet_loss(image_cls, recipe_pooled, triplet_margin);
    return out;
}

torch::Tensor MalmModelImpl::embed_images(const torch::Tensor& images) {
    torch::Tensor cls = student->encode_full(images).index(
        {torch::indexing::Slice(), 0, torch::indexing::Slice()});
    return l2_normalize_rows(proj_image(cls));
}

torch::Tensor MalmModelImpl::embed_recipes(const PairedBatch& batch) {
    torch::Tensor fused = recipe->forward(batch.title_ids, batch.ingredient_ids,
                                          batch.instruction_ids);
    return l2_normalize_rows(proj_recipe(fused.mean(1)));
}

MatchOutputs MalmModelImpl::match_full(const PairedBatch& batch) {
    torch::Tensor full = proj_image(student->encode_full(batch.images));
    torch::Tensor rec = proj_recipe(recipe->forward(batch.title_ids, batch.ingredient_ids,
                                                    batch.instruction_ids));
    return matching->forward(full, rec);
}

std::vector<torch::Tensor> MalmModelImpl::image_encoder_parameters() {
    return student->parameters(true);
}

std::vector<torch::Tensor> MalmModelImpl::main_parameters() {
    std::vector<torch::Tensor> out;
    auto student_params = student->parameters(true);
    auto is_student = [&](const torch::Tensor& p) {
        for (const auto& s : student_params)
            if (s.unsafeGetTensorImpl() == p.unsafeGetTensorImpl()) return true;
        return false;
    };
    for (auto& p : parameters(true)) {
        if (!p.requires_grad()) continue;  // teachers
        if (is_student(p)) continue;
        out.push_back(p);
    }
    return out;
}

void MalmModelImpl::ema_step(double momentum) {
    ema_update(*student, *teacher, momentum);
    if (teacher_recipe) ema_update(*recipe, *teacher_recipe, momentum);
}

torch::Tensor triplet_loss(const torch::Tensor& image_global,
                           const torch::Tensor& recipe_global, double margin) {
    check(image_global.dim() == 2 && image_global.sizes() == recipe_global.sizes(),
          "triplet inputs must be matching B x D matrices");
    int64_t B = image_global.size(0);
    check(B >= 2, "triplet loss needs a batch of at least 2");
    torch::Tensor x = l2_normalize_rows(image_global);
    torch::Tensor y = l2_normalize_rows(recipe_global);
    torch::Tensor sim = torch::matmul(x, y.transpose(0, 1));  // B x B cosine
    torch::Tensor pos = sim.diagonal();
    torch::Tensor off = sim.masked_fill(torch::eye(B, torch::kBool),
                                        -std::numeric_limits<double>::infinity());
    torch::Tensor hardest_rows = std::get<0>(off.max(1));  // image anchors
    torch::Tensor hardest_cols = std::get<0>(off.max(0));  // recipe anchors
    torch::Tensor fwd = torch::relu(margin - pos + hardest_rows);
    torch::Tensor bwd = torch::relu(margin - pos + hardest_cols);
    return ((fwd + bwd) / 2.0).mean();
}

}  // namespace malm
