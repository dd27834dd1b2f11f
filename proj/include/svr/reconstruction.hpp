#pragma once

// Regenerates the source-width middle frame from the fused retargeted
// representation: project the warped stream to the PAM width, add, undo the
// column mapping, then five same-size conv blocks.

#include <array>
#include <string>

#include "svr/module.hpp"
#include "svr/pam.hpp"
#include "svr/shift_warp.hpp"

namespace svr {

inline constexpr std::array<std::size_t, 5> kReconChannels{64, 128, 512, 128, 3};

template <class T>
class Reconstruction {
public:
    Reconstruction(std::size_t warped_channels, std::uint64_t seed) : Cw_(warped_channels) {
        Rng rng(seed);
        add_conv(store, rng, "recon.proj", Cw_, kPamOutChannels, 1);
        std::size_t in = kPamOutChannels;
        for (std::size_t i = 0; i < kReconChannels.size(); ++i) {
            add_conv(store, rng, "recon.conv" + std::to_string(i), in, kReconChannels[i], i == 0 ? 5 : 3);
            in = kReconChannels[i];
        }
    }

    /// pam_out [64,H,W'], warped [C_w,H,W'] -> [3,H,W].
    Var<T> forward(Tape<T>& tape, Var<T> pam_out, Var<T> warped, const ColumnMapping& mapping) {
        const auto& ps = pam_out.shape();
        const auto& ws = warped.shape();
        if (ps.size() != 3 || ws.size() != 3 || ps[0] != kPamOutChannels || ws[0] != Cw_ ||
            ps[1] != ws[1] || ps[2] != ws[2])
            throw DimensionError("reconstruct: pam output " + shape_string(ps) + " and warped stream " +
                                 shape_string(ws) + " disagree");
        auto x = add(pam_out, apply_conv(tape, store, "recon.proj", warped));
        x = inverse_warp(x, mapping);
        for (std::size_t i = 0; i < kReconChannels.size(); ++i) {
            x = apply_conv(tape, store, "recon.conv" + std::to_string(i), x);
            if (i + 1 < kReconChannels.size()) x = relu(x);
        }
        return x;
    }

    ParamStore<T> store;

private:
    std::size_t Cw_;
};

}  // namespace svr
