#include "xar/entities.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "xar/errors.hpp"

namespace xar {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw LayoutError(msg);
    }
}

std::string shape_str(GridShape g) {
    std::ostringstream os;
    os << g.h << "x" << g.w << "x" << g.c;
    return os.str();
}

}  // namespace

std::string_view to_string(EntityKind kind) {
    switch (kind) {
        case EntityKind::Token: return "token";
        case EntityKind::Cell: return "cell";
        case EntityKind::Subsample: return "subsample";
        case EntityKind::Scale: return "scale";
        case EntityKind::Image: return "image";
    }
    return "?";
}

EntityKind parse_entity_kind(std::string_view name) {
    for (EntityKind k : {EntityKind::Token, EntityKind::Cell, EntityKind::Subsample, EntityKind::Scale,
                         EntityKind::Image}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw LayoutError("unknown entity kind '" + std::string(name) + "'");
}

LatentGrid::LatentGrid(GridShape shape, double fill) : shape_(shape), values_(shape.numel(), fill) {}

LatentGrid::LatentGrid(GridShape shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.numel()) {
        throw LayoutError("latent value count does not match shape " + shape_str(shape_));
    }
}

std::string LayoutSpec::to_config() const {
    std::ostringstream os;
    os << "kind = " << to_string(kind) << "\n";
    switch (kind) {
        case EntityKind::Cell: os << "cell_size = " << cell_size << "\n"; break;
        case EntityKind::Subsample: os << "distance = " << distance << "\n"; break;
        case EntityKind::Scale:
            if (!scales.empty()) {
                os << "scales = ";
                for (std::size_t i = 0; i < scales.size(); ++i) {
                    os << (i ? "," : "") << scales[i];
                }
                os << "\n";
            } else {
                os << "scale_levels = " << scale_levels << "\n";
            }
            break;
        default: break;
    }
    return os.str();
}

std::size_t EntityLayout::total_tokens() const {
    return spans_.empty() ? 0 : spans_.back().offset + spans_.back().count;
}

std::size_t EntityLayout::entity_of_token(std::size_t t) const {
    auto it = std::upper_bound(spans_.begin(), spans_.end(), t,
                               [](std::size_t v, const TokenSpan& s) { return v < s.offset; });
    return static_cast<std::size_t>(it - spans_.begin()) - 1;
}

std::vector<std::pair<double, double>> EntityLayout::token_coordinates() const {
    std::vector<std::pair<double, double>> out;
    out.reserve(total_tokens());
    if (kind_ == EntityKind::Scale) {
        for (std::size_t s : scales_) {
            const double stride_h = static_cast<double>(grid_.h) / static_cast<double>(s);
            const double stride_w = static_cast<double>(grid_.w) / static_cast<double>(s);
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t j = 0; j < s; ++j) {
                    out.emplace_back((static_cast<double>(i) + 0.5) * stride_h - 0.5,
                                     (static_cast<double>(j) + 0.5) * stride_w - 0.5);
                }
            }
        }
        return out;
    }
    for (std::size_t p : source_) {
        out.emplace_back(static_cast<double>(p / grid_.w), static_cast<double>(p % grid_.w));
    }
    return out;
}

LayoutSpec EntityLayout::spec() const {
    LayoutSpec s;
    s.kind = kind_;
    s.cell_size = cell_size_;
    s.distance = distance_;
    s.scales = scales_;
    return s;
}

std::vector<std::size_t> default_scale_schedule(std::size_t base, std::size_t levels) {
    if (base == 0 || levels == 0) {
        throw ScheduleError("scale schedule needs positive base and level count");
    }
    if (levels > 63 || base % (std::size_t{1} << (levels - 1)) != 0) {
        throw ScheduleError("base " + std::to_string(base) + " is not divisible by 2^" + std::to_string(levels - 1));
    }
    std::vector<std::size_t> out(levels);
    for (std::size_t i = 0; i < levels; ++i) {
        out[i] = base >> (levels - 1 - i);
    }
    return out;
}

EntityLayout build_layout(EntityKind kind, GridShape grid, const LayoutParam& param) {
    require(grid.h >= 1 && grid.w >= 1 && grid.c >= 1, "grid dimensions must be positive, got " + shape_str(grid));
    EntityLayout L;
    L.kind_ = kind;
    L.grid_ = grid;
    const std::size_t h = grid.h;
    const std::size_t w = grid.w;

    auto int_param = [&](const char* what) {
        const auto* v = std::get_if<std::size_t>(&param);
        require(v != nullptr, std::string(to_string(kind)) + " layout requires integer " + what);
        require(*v >= 1, std::string(what) + " must be positive");
        return *v;
    };

    switch (kind) {
        case EntityKind::Token:
        case EntityKind::Image: {
            L.source_.resize(h * w);
            for (std::size_t p = 0; p < h * w; ++p) {
                L.source_[p] = p;
            }
            if (kind == EntityKind::Token) {
                for (std::size_t p = 0; p < h * w; ++p) {
                    L.spans_.push_back({p, 1});
                }
            } else {
                L.spans_.push_back({0, h * w});
            }
            break;
        }
        case EntityKind::Cell: {
            const std::size_t k = int_param("cell size");
            require(h % k == 0 && w % k == 0,
                    "cell size " + std::to_string(k) + " does not divide grid " + shape_str(grid));
            L.cell_size_ = k;
            const std::size_t mh = h / k;
            const std::size_t mw = w / k;
            // (h k1) (w k2) -> (h w k1 k2)
            for (std::size_t ci = 0; ci < mh; ++ci) {
                for (std::size_t cj = 0; cj < mw; ++cj) {
                    L.spans_.push_back({L.source_.size(), k * k});
                    for (std::size_t k1 = 0; k1 < k; ++k1) {
                        for (std::size_t k2 = 0; k2 < k; ++k2) {
                            L.source_.push_back((ci * k + k1) * w + cj * k + k2);
                        }
                    }
                }
            }
            break;
        }
        case EntityKind::Subsample: {
            const std::size_t d = int_param("distance");
            require(h % d == 0 && w % d == 0,
                    "distance " + std::to_string(d) + " does not divide grid " + shape_str(grid));
            L.distance_ = d;
            const std::size_t sh = h / d;
            const std::size_t sw = w / d;
            // (d1 h) (d2 w) -> (h w d1 d2); N = d^2 spans of sh*sw tokens over that order.
            for (std::size_t i = 0; i < sh; ++i) {
                for (std::size_t j = 0; j < sw; ++j) {
                    for (std::size_t d1 = 0; d1 < d; ++d1) {
                        for (std::size_t d2 = 0; d2 < d; ++d2) {
                            L.source_.push_back((d1 * sh + i) * w + d2 * sw + j);
                        }
                    }
                }
            }
            for (std::size_t n = 0; n < d * d; ++n) {
                L.spans_.push_back({n * sh * sw, sh * sw});
            }
            break;
        }
        case EntityKind::Scale: {
            require(h == w, "scale layout requires a square grid, got " + shape_str(grid));
            std::vector<std::size_t> scales;
            if (const auto* list = std::get_if<std::vector<std::size_t>>(&param)) {
                scales = *list;
            } else if (const auto* levels = std::get_if<std::size_t>(&param)) {
                try {
                    scales = default_scale_schedule(h, *levels);
                } catch (const ScheduleError& e) {
                    throw LayoutError(e.what());
                }
            } else {
                throw LayoutError("scale layout requires a scale list or level count");
            }
            require(!scales.empty(), "scale list is empty");
            for (std::size_t i = 0; i < scales.size(); ++i) {
                require(scales[i] >= 1, "scales must be positive");
                require(i == 0 || scales[i] > scales[i - 1], "scales must be strictly ascending");
            }
            require(scales.back() == h, "final scale " + std::to_string(scales.back()) + " must equal grid size " +
                                            std::to_string(h));
            std::size_t offset = 0;
            for (std::size_t s : scales) {
                L.spans_.push_back({offset, s * s});
                offset += s * s;
            }
            L.scales_ = std::move(scales);
            break;
        }
    }
    return L;
}

EntityLayout build_layout(const LayoutSpec& spec, GridShape grid) {
    switch (spec.kind) {
        case EntityKind::Cell: return build_layout(spec.kind, grid, spec.cell_size);
        case EntityKind::Subsample: return build_layout(spec.kind, grid, spec.distance);
        case EntityKind::Scale:
            if (!spec.scales.empty()) {
                return build_layout(spec.kind, grid, spec.scales);
            }
            return build_layout(spec.kind, grid, spec.scale_levels);
        default: return build_layout(spec.kind, grid);
    }
}

Matrix EntitySequence::entity(std::size_t n) const {
    const TokenSpan& s = layout.spans().at(n);
    return rows_slice(tokens, s.offset, s.count);
}

LatentGrid resize_area(const LatentGrid& latent, std::size_t s) {
    const GridShape g = latent.shape();
    GridShape out_shape{s, s, g.c};
    LatentGrid out(out_shape);
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t r0 = (i * g.h) / s;
        const std::size_t r1 = ((i + 1) * g.h + s - 1) / s;
        for (std::size_t j = 0; j < s; ++j) {
            const std::size_t c0 = (j * g.w) / s;
            const std::size_t c1 = ((j + 1) * g.w + s - 1) / s;
            const double n = static_cast<double>((r1 - r0) * (c1 - c0));
            for (std::size_t ch = 0; ch < g.c; ++ch) {
                double acc = 0.0;
                for (std::size_t r = r0; r < r1; ++r) {
                    for (std::size_t c = c0; c < c1; ++c) {
                        acc += latent.at(r, c, ch);
                    }
                }
                out.at(i, j, ch) = acc / n;
            }
        }
    }
    return out;
}

EntitySequence latent_to_entities(const LatentGrid& latent, const EntityLayout& layout) {
    if (!(latent.shape() == layout.grid())) {
        throw LayoutError("latent shape " + shape_str(latent.shape()) + " does not match layout grid " +
                          shape_str(layout.grid()));
    }
    const std::size_t c = layout.grid().c;
    EntitySequence seq{Matrix(layout.total_tokens(), c), layout};
    if (layout.kind() == EntityKind::Scale) {
        std::size_t t = 0;
        for (std::size_t s : layout.scales()) {
            const LatentGrid r = (s == layout.grid().h) ? latent : resize_area(latent, s);
            std::copy(r.values().begin(), r.values().end(), seq.tokens.data.begin() + static_cast<std::ptrdiff_t>(t * c));
            t += s * s;
        }
        return seq;
    }
    const auto& src = layout.source_positions();
    for (std::size_t t = 0; t < src.size(); ++t) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            seq.tokens(t, ch) = latent.values()[src[t] * c + ch];
        }
    }
    return seq;
}

LatentGrid entities_to_latent(const EntitySequence& seq) {
    const EntityLayout& layout = seq.layout;
    const GridShape g = layout.grid();
    if (seq.tokens.rows != layout.total_tokens() || seq.tokens.cols != g.c) {
        throw LayoutError("entity tokens do not match layout");
    }
    LatentGrid out(g);
    if (layout.kind() == EntityKind::Scale) {
        const TokenSpan last = layout.spans().back();
        std::copy_n(seq.tokens.data.begin() + static_cast<std::ptrdiff_t>(last.offset * g.c), last.count * g.c,
                    out.values().begin());
        return out;
    }
    const auto& src = layout.source_positions();
    for (std::size_t t = 0; t < src.size(); ++t) {
        for (std::size_t ch = 0; ch < g.c; ++ch) {
            out.values()[src[t] * g.c + ch] = seq.tokens(t, ch);
        }
    }
    return out;
}

const std::vector<TokenSpan>& entity_token_spans(const EntityLayout& layout) {
    return layout.spans();
}

}  // namespace xar
