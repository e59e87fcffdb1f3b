#ifndef ANCHORKIT_FIXTURES_HPP
#define ANCHORKIT_FIXTURES_HPP

#include <cstdint>
#include <string>

#include "anchorkit/io.hpp"
#include "anchorkit/vision.hpp"

namespace anchorkit {

// Seeded synthetic footage for tests, benchmarks, and CLI demos.
//   translate: smooth random texture drifting 1 px/frame to the right (wraps)
//   static:    the same texture, no motion
//   mix:       linear cross-fade between two textures
//   noise:     independent per-frame noise
struct FixtureSpec {
    std::string kind = "translate";
    int frames = 25;
    int width = 64;
    int height = 64;
    std::uint64_t seed = 1;
};

class FixtureRenderer {
public:
    explicit FixtureRenderer(const FixtureSpec& spec);
    int count() const { return spec_.frames; }
    RgbImage frame(int index) const;

private:
    FixtureSpec spec_;
    GrayImage tex_a_, tex_b_;
};

// Renders the whole sequence into `dir` as a frame directory with manifest.
void write_fixture(const FixtureSpec& spec, const std::string& dir);

}  // namespace anchorkit

#endif
