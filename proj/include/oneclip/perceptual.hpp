#pragma once

#include <memory>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "core.hpp"

namespace oneclip {

// Perceptual distance backend. distance() must be exactly zero for identical
// inputs and differentiable through the tape.
class PerceptualBackend {
public:
    virtual ~PerceptualBackend() = default;
    const std::string& name() const { return name_; }

    // a, b: [B,3,H,W] -> scalar mean feature distance.
    virtual Ref distance(Tape& tape, Ref a, Ref b) const = 0;

protected:
    explicit PerceptualBackend(std::string name) : name_(std::move(name)) {}
    std::string name_;
};

// Fixed random 3-layer conv feature stack; the distance is the mean squared
// feature difference summed over layers. Self-distance is exactly 0 and the
// whole thing is differentiable, which is all the search and L_ref need.
class ToyPerceptual : public PerceptualBackend {
public:
    explicit ToyPerceptual(std::uint64_t seed, int channels = 8) : PerceptualBackend("toy") {
        RandomSource rng(seed, kStream);
        int c_in = 3;
        for (int l = 0; l < 3; ++l) {
            double std = std::sqrt(2.0 / (9.0 * c_in));
            weights_.push_back(Tensor::randn({channels, c_in, 3, 3}, rng, std));
            biases_.push_back(Tensor({channels}));
            c_in = channels;
        }
    }

    Ref distance(Tape& tape, Ref a, Ref b) const override {
        std::vector<Ref> fa = features(tape, a);
        std::vector<Ref> fb = features(tape, b);
        Ref total = tape.constant(Tensor({1}));
        for (std::size_t l = 0; l < fa.size(); ++l) total = tape.add(total, tape.mse(fa[l], fb[l]));
        return total;
    }

private:
    static constexpr std::uint64_t kStream = 903;

    std::vector<Ref> features(Tape& tape, Ref x) const {
        std::vector<Ref> out;
        Ref h = x;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            h = tape.conv2d(h, tape.constant(weights_[l]), tape.constant(biases_[l]), 1);
            h = tape.leaky_relu(h, 0.2);
            out.push_back(h);
            if (l + 1 < weights_.size()) h = tape.avgpool2(h);
        }
        return out;
    }

    std::vector<Tensor> weights_;
    std::vector<Tensor> biases_;
};

inline std::shared_ptr<PerceptualBackend> make_perceptual(const std::string& name, std::uint64_t seed) {
    if (name == "toy") return std::make_shared<ToyPerceptual>(seed);
    throw BackendError("unknown perceptual backend '" + name + "' (no import adapter available)");
}

inline double perceptual_distance(const PerceptualBackend& backend, const ImageBatch& a, const ImageBatch& b) {
    Tape tape(false);
    return tape.item(backend.distance(tape, tape.constant(a.data), tape.constant(b.data)));
}

}  // namespace oneclip
