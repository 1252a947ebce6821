// Command-line front end: dataset generation, training, inference and
// evaluation as subcommands of a single binary.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "wsloc/evaluation.hpp"
#include "wsloc/pgm.hpp"
#include "wsloc/synthetic.hpp"
#include "wsloc/trainer.hpp"

namespace fs = std::filesystem;

namespace {

wsloc::PoolKind parse_pool_kind(const std::string& name, double gamma, double gamma0,
                                double beta) {
    if (name == "avg") return wsloc::AveragePool{};
    if (name == "linear") return wsloc::LinearPool{};
    if (name == "exp") return wsloc::ExponentialPool{};
    if (name == "lse") return wsloc::LsePool{gamma};
    if (name == "lselba") return wsloc::LseLbaPool{gamma0, beta};
    if (name == "attention") return wsloc::AttentionPool{};
    if (name == "pcam") return wsloc::PcamPool{};
    throw std::invalid_argument("unknown pooling kind: " + name);
}

fs::path with_class_suffix(const fs::path& path, std::size_t cls, std::size_t num_classes) {
    if (num_classes <= 1) return path;
    fs::path out = path;
    out.replace_filename(path.stem().string() + ".class" + std::to_string(cls) +
                         path.extension().string());
    return out;
}

int run_gradcheck(const std::string& kind_name, double gamma, double gamma0, double beta,
                  std::uint64_t seed, int instances) {
    wsloc::PoolKind kind = parse_pool_kind(kind_name, gamma, gamma0, beta);
    wsloc::GradCheckReport report = wsloc::gradcheck(kind, seed, instances);
    std::cout << "gradcheck kind=" << kind_name << " instances=" << report.instances << "\n";
    for (const auto& [group, err] : report.group_max_rel_err)
        std::cout << "  " << group << ": max rel err " << err << "\n";
    std::cout << "max rel err: " << report.max_rel_err << "\n";
    if (report.max_rel_err >= 1e-5) {
        std::cerr << "error: gradient check failed (>= 1e-5)\n";
        return 1;
    }
    return 0;
}

int run_train(const fs::path& data_dir, const std::string& pooling, double gamma,
              double gamma0, double beta, double lr, int epochs, int batch,
              std::uint64_t seed, const fs::path& out_path) {
    wsloc::LoadedDataset dataset = wsloc::load_dataset(data_dir);
    wsloc::TrainConfig cfg;
    cfg.pooling = parse_pool_kind(pooling, gamma, gamma0, beta);
    cfg.learning_rate = lr;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.seed = seed;
    cfg.num_classes = dataset.config.num_classes;

    wsloc::TrainResult result = wsloc::train(cfg, dataset.samples);
    for (const wsloc::EpochLog& log : result.log) {
        std::cout << "epoch " << log.epoch << " train_loss " << log.train_loss;
        for (std::size_t k = 0; k < log.valid_auc.size(); ++k) {
            std::cout << " valid_auc_" << k << " ";
            if (log.valid_auc[k])
                std::cout << *log.valid_auc[k];
            else
                std::cout << "-";
        }
        std::cout << "\n";
    }
    wsloc::save_checkpoint(out_path, result.state);
    std::cout << "saved model to " << out_path.string() << "\n";
    return 0;
}

int run_infer(const fs::path& model_path, const fs::path& image_path, double tau,
              const fs::path& heatmap_path, const fs::path& boxes_path, bool cam_baseline,
              const std::string& image_id, const fs::path& append_scores,
              const fs::path& append_boxes) {
    wsloc::TrainState state = wsloc::load_checkpoint(model_path);
    wsloc::Tensor image = wsloc::map_from_gray8(wsloc::read_pgm(image_path));
    wsloc::InferenceResult result = cam_baseline
                                        ? wsloc::infer_cam_baseline(state, image)
                                        : wsloc::infer(state, image, tau);

    const std::string id = image_id.empty() ? image_path.stem().string() : image_id;
    for (std::size_t k = 0; k < result.probabilities.size(); ++k)
        std::cout << "class " << k << " probability " << result.probabilities[k] << "\n";
    std::cout << "boxes: " << result.boxes.size() << "\n";

    if (!heatmap_path.empty()) {
        for (std::size_t k = 0; k < result.prob_maps.size(); ++k) {
            const fs::path out =
                with_class_suffix(heatmap_path, k, result.prob_maps.size());
            wsloc::write_pgm(out, wsloc::gray8_from_map(result.prob_maps[k]));
        }
    }
    if (!boxes_path.empty()) {
        std::vector<wsloc::BoxRecord> records;
        for (const wsloc::Box& b : result.boxes) records.push_back({id, b});
        wsloc::write_boxes_csv(boxes_path, records);
    }
    if (!append_boxes.empty()) {
        const bool fresh = !fs::exists(append_boxes);
        std::ofstream os(append_boxes, std::ios::binary | std::ios::app);
        if (fresh) os << "image_id,class_id,x,y,w,h,score\n";
        for (const wsloc::Box& b : result.boxes)
            os << id << "," << b.class_id << "," << b.x << "," << b.y << "," << b.w << ","
               << b.h << "," << wsloc::detail::format_double(b.score) << "\n";
    }
    if (!append_scores.empty()) {
        const bool fresh = !fs::exists(append_scores);
        std::ofstream os(append_scores, std::ios::binary | std::ios::app);
        if (fresh) {
            os << "image_id";
            for (std::size_t k = 0; k < result.probabilities.size(); ++k)
                os << ",score_" << k;
            os << "\n";
        }
        os << id;
        for (double p : result.probabilities)
            os << "," << wsloc::detail::format_double(p);
        os << "\n";
    }
    return 0;
}

int run_eval(const fs::path& pred, const fs::path& gt, const fs::path& labels,
             const fs::path& scores, double iobb_threshold) {
    auto pred_boxes = wsloc::read_boxes_csv(pred);
    auto gt_boxes = wsloc::read_boxes_csv(gt);
    wsloc::AnnotationSet annotations;
    annotations.labels = wsloc::read_labels_csv(labels);
    for (const auto& r : gt_boxes) annotations.add_box(r.image_id, r.box);
    auto score_map = wsloc::read_scores_csv(scores);

    wsloc::EvalReport report =
        wsloc::evaluate(pred_boxes, annotations, score_map, iobb_threshold);
    wsloc::print_report_csv(std::cout, report);
    std::cout << "\n";
    wsloc::print_report_table(std::cout, report);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"weakly supervised lesion localization toolkit"};
    app.require_subcommand(1);

    // gradcheck
    std::string gc_kind = "pcam";
    double gc_gamma = 1.0, gc_gamma0 = 0.0, gc_beta = 0.0;
    std::uint64_t gc_seed = 0;
    int gc_instances = 50;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    gradcheck->add_option("--kind", gc_kind, "avg|linear|exp|lse|lselba|attention|pcam")
        ->required();
    gradcheck->add_option("--gamma", gc_gamma, "LSE sharpness");
    gradcheck->add_option("--gamma0", gc_gamma0, "LSE-LBA lower bound");
    gradcheck->add_option("--beta", gc_beta, "LSE-LBA log-scale init");
    gradcheck->add_option("--seed", gc_seed, "random seed");
    gradcheck->add_option("--instances", gc_instances, "random instances to check");

    // synth-gen
    fs::path sg_out;
    int sg_n = 100;
    std::uint64_t sg_seed = 0;
    auto* synth = app.add_subcommand("synth-gen", "generate a synthetic blob dataset");
    synth->add_option("--out", sg_out, "output directory")->required();
    synth->add_option("--n", sg_n, "number of images")->required();
    synth->add_option("--seed", sg_seed, "random seed");

    // train
    fs::path tr_data, tr_out;
    std::string tr_pooling = "pcam";
    double tr_gamma = 1.0, tr_gamma0 = 0.0, tr_beta = 0.0, tr_lr = 0.01;
    int tr_epochs = 20, tr_batch = 16;
    std::uint64_t tr_seed = 0;
    auto* train = app.add_subcommand("train", "train a model on a dataset directory");
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--pooling", tr_pooling, "avg|linear|exp|lse|lselba|attention|pcam");
    train->add_option("--gamma", tr_gamma, "LSE sharpness");
    train->add_option("--gamma0", tr_gamma0, "LSE-LBA lower bound");
    train->add_option("--beta", tr_beta, "LSE-LBA log-scale init");
    train->add_option("--lr", tr_lr, "learning rate");
    train->add_option("--epochs", tr_epochs, "epochs");
    train->add_option("--batch", tr_batch, "batch size");
    train->add_option("--seed", tr_seed, "random seed");
    train->add_option("--out", tr_out, "model output path")->required();

    // infer
    fs::path in_model, in_image, in_heatmap, in_boxes, in_append_scores, in_append_boxes;
    double in_tau = 0.9;
    bool in_cam = false;
    std::string in_id;
    auto* infer = app.add_subcommand("infer", "run inference on one image");
    infer->add_option("--model", in_model, "model file")->required();
    infer->add_option("--image", in_image, "input PGM image")->required();
    infer->add_option("--tau", in_tau, "probability threshold");
    infer->add_option("--heatmap", in_heatmap, "output heatmap PGM (per class)");
    infer->add_option("--boxes", in_boxes, "output box CSV");
    infer->add_flag("--cam", in_cam, "use the normalize-255 CAM path instead");
    infer->add_option("--id", in_id, "image id for CSV rows");
    infer->add_option("--append-scores", in_append_scores,
                      "append image-level scores to this CSV");
    infer->add_option("--append-boxes", in_append_boxes, "append boxes to this CSV");

    // eval
    fs::path ev_pred, ev_gt, ev_labels, ev_scores;
    double ev_iobb = 0.5;
    auto* eval = app.add_subcommand("eval", "evaluate predictions against ground truth");
    eval->add_option("--pred", ev_pred, "predicted boxes CSV")->required();
    eval->add_option("--gt", ev_gt, "ground-truth boxes CSV")->required();
    eval->add_option("--labels", ev_labels, "labels CSV")->required();
    eval->add_option("--scores", ev_scores, "image-level scores CSV")->required();
    eval->add_option("--iobb", ev_iobb, "IoBB threshold");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gradcheck->parsed())
            return run_gradcheck(gc_kind, gc_gamma, gc_gamma0, gc_beta, gc_seed, gc_instances);
        if (synth->parsed()) {
            wsloc::SynthConfig cfg;
            cfg.seed = sg_seed;
            cfg.n_images = sg_n;
            wsloc::write_dataset(sg_out, cfg, wsloc::generate_dataset(cfg));
            std::cout << "wrote " << sg_n << " images to " << sg_out.string() << "\n";
            return 0;
        }
        if (train->parsed())
            return run_train(tr_data, tr_pooling, tr_gamma, tr_gamma0, tr_beta, tr_lr,
                             tr_epochs, tr_batch, tr_seed, tr_out);
        if (infer->parsed())
            return run_infer(in_model, in_image, in_tau, in_heatmap, in_boxes, in_cam, in_id,
                             in_append_scores, in_append_boxes);
        if (eval->parsed())
            return run_eval(ev_pred, ev_gt, ev_labels, ev_scores, ev_iobb);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
