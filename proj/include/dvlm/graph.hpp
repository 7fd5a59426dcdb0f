#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dvlm/mat.hpp"

namespace dvlm {

// Reverse-mode tape over Mat<S>. Nodes are created in topological order, so
// recompute() replays forward closures front-to-back and backward() replays
// gradient closures back-to-front. Leaves bound to external storage re-read
// their source on recompute, which lets a caller perturb a parameter in place
// and re-evaluate the same graph (finite differences without rebuilding).
// constant() snapshots its value and has no incoming edge: a detached input
// stays fixed under recompute by construction.
template <class S>
class Graph {
  public:
    struct Var {
        int id = -1;
        int rows = 0;
        int cols = 0;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // --- leaves ---------------------------------------------------------

    // External input; recompute re-reads *src. If grad_sink is non-null the
    // accumulated gradient is added into it after backward().
    Var input(const Mat<S>& src, Mat<S>* grad_sink = nullptr) {
        Node n;
        n.val = src;
        n.src = &src;
        n.grad_sink = grad_sink;
        n.needs_grad = grad_sink != nullptr;
        return push(std::move(n));
    }

    // Value frozen at call time; no dependence on anything.
    Var constant(Mat<S> v) {
        Node n;
        n.val = std::move(v);
        return push(std::move(n));
    }

    Var scalar_const(S v) {
        Mat<S> m(1, 1);
        m.a[0] = v;
        return constant(std::move(m));
    }

    // --- accessors ------------------------------------------------------

    const Mat<S>& value(Var v) const { return nodes_[v.id].val; }
    const Mat<S>& grad(Var v) const { return nodes_[v.id].grad; }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // --- elementwise ----------------------------------------------------

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        return make(a.rows, a.cols, {a, b},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        const auto& y = g.nodes_[p[1]].val;
                        for (size_t i = 0; i < o.a.size(); ++i) o.a[i] = x.a[i] + y.a[i];
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += go.a[i];
                        });
                        g.accum(p[1], [&](Mat<S>& gb) {
                            for (size_t i = 0; i < gb.a.size(); ++i) gb.a[i] += go.a[i];
                        });
                    });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        return make(a.rows, a.cols, {a, b},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        const auto& y = g.nodes_[p[1]].val;
                        for (size_t i = 0; i < o.a.size(); ++i) o.a[i] = x.a[i] - y.a[i];
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += go.a[i];
                        });
                        g.accum(p[1], [&](Mat<S>& gb) {
                            for (size_t i = 0; i < gb.a.size(); ++i) gb.a[i] -= go.a[i];
                        });
                    });
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        return make(a.rows, a.cols, {a, b},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        const auto& y = g.nodes_[p[1]].val;
                        for (size_t i = 0; i < o.a.size(); ++i) o.a[i] = x.a[i] * y.a[i];
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        const auto& x = g.nodes_[p[0]].val;
                        const auto& y = g.nodes_[p[1]].val;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += go.a[i] * y.a[i];
                        });
                        g.accum(p[1], [&](Mat<S>& gb) {
                            for (size_t i = 0; i < gb.a.size(); ++i) gb.a[i] += go.a[i] * x.a[i];
                        });
                    });
    }

    Var scale(Var a, S c) {
        return make(a.rows, a.cols, {a},
                    [c](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        for (size_t i = 0; i < o.a.size(); ++i) o.a[i] = x.a[i] * c;
                    },
                    [c](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += go.a[i] * c;
                        });
                    });
    }

    // out = a * s where s is a 1x1 var (gating).
    Var scale_by(Var a, Var s) {
        if (s.rows != 1 || s.cols != 1) throw ShapeError("scale_by expects 1x1 gate");
        return make(a.rows, a.cols, {a, s},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        S sv = g.nodes_[p[1]].val.a[0];
                        for (size_t i = 0; i < o.a.size(); ++i) o.a[i] = x.a[i] * sv;
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        const auto& x = g.nodes_[p[0]].val;
                        S sv = g.nodes_[p[1]].val.a[0];
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += go.a[i] * sv;
                        });
                        g.accum(p[1], [&](Mat<S>& gs) {
                            S acc = S(0);
                            for (size_t i = 0; i < x.a.size(); ++i) acc += go.a[i] * x.a[i];
                            gs.a[0] += acc;
                        });
                    });
    }

    // Broadcast a 1xC row over all rows of a (bias add).
    Var add_row(Var a, Var brow) {
        if (brow.rows != 1 || brow.cols != a.cols)
            throw ShapeError("add_row " + shape_str(a.rows, a.cols) + " + " +
                             shape_str(brow.rows, brow.cols));
        return make(a.rows, a.cols, {a, brow},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        const auto& b = g.nodes_[p[1]].val;
                        for (int r = 0; r < o.rows; ++r)
                            for (int c = 0; c < o.cols; ++c) o.at(r, c) = x.at(r, c) + b.a[c];
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += go.a[i];
                        });
                        g.accum(p[1], [&](Mat<S>& gb) {
                            for (int r = 0; r < go.rows; ++r)
                                for (int c = 0; c < go.cols; ++c) gb.a[c] += go.at(r, c);
                        });
                    });
    }

    Var abs(Var a) {
        return make(a.rows, a.cols, {a},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        for (size_t i = 0; i < o.a.size(); ++i)
                            o.a[i] = x.a[i] < S(0) ? -x.a[i] : x.a[i];
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        const auto& x = g.nodes_[p[0]].val;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i) {
                                S s = x.a[i] > S(0) ? S(1) : (x.a[i] < S(0) ? S(-1) : S(0));
                                ga.a[i] += go.a[i] * s;
                            }
                        });
                    });
    }

    // tanh-approximated GELU; smooth everywhere, which keeps finite-difference
    // probes well conditioned.
    Var gelu(Var a) {
        return make(a.rows, a.cols, {a},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        for (size_t i = 0; i < o.a.size(); ++i) o.a[i] = gelu_fwd(x.a[i]);
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        const auto& x = g.nodes_[p[0]].val;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (size_t i = 0; i < ga.a.size(); ++i)
                                ga.a[i] += go.a[i] * gelu_bwd(x.a[i]);
                        });
                    });
    }

    // --- linear algebra -------------------------------------------------

    Var matmul(Var a, Var b) {
        if (a.cols != b.rows)
            throw ShapeError("matmul " + shape_str(a.rows, a.cols) + " * " +
                             shape_str(b.rows, b.cols));
        return make(a.rows, b.cols, {a, b},
                    [](Graph& g, int out, const int* p) {
                        mm(g.nodes_[p[0]].val, g.nodes_[p[1]].val, g.nodes_[out].val);
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        const auto& A = g.nodes_[p[0]].val;
                        const auto& B = g.nodes_[p[1]].val;
                        // dA += go * B^T
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (int i = 0; i < A.rows; ++i)
                                for (int j = 0; j < B.cols; ++j) {
                                    S gij = go.at(i, j);
                                    if (gij == S(0)) continue;
                                    const S* bj = &B.a[j];
                                    S* gi = ga.row(i);
                                    for (int k = 0; k < A.cols; ++k)
                                        gi[k] += gij * bj[static_cast<size_t>(k) * B.cols];
                                }
                        });
                        // dB += A^T * go
                        g.accum(p[1], [&](Mat<S>& gb) {
                            for (int i = 0; i < A.rows; ++i) {
                                const S* ai = A.row(i);
                                const S* gi = go.row(i);
                                for (int k = 0; k < A.cols; ++k) {
                                    S aik = ai[k];
                                    if (aik == S(0)) continue;
                                    S* bk = gb.row(k);
                                    for (int j = 0; j < B.cols; ++j) bk[j] += aik * gi[j];
                                }
                            }
                        });
                    });
    }

    Var transpose(Var a) {
        return make(a.cols, a.rows, {a},
                    [](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        for (int r = 0; r < x.rows; ++r)
                            for (int c = 0; c < x.cols; ++c) o.at(c, r) = x.at(r, c);
                    },
                    [](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (int r = 0; r < ga.rows; ++r)
                                for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += go.at(c, r);
                        });
                    });
    }

    // --- slicing / concatenation ---------------------------------------

    Var slice_rows(Var a, int r0, int n) {
        if (r0 < 0 || n < 0 || r0 + n > a.rows) throw ShapeError("slice_rows out of range");
        return make(n, a.cols, {a},
                    [r0, n](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        for (int r = 0; r < n; ++r)
                            for (int c = 0; c < x.cols; ++c) o.at(r, c) = x.at(r0 + r, c);
                    },
                    [r0, n](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (int r = 0; r < n; ++r)
                                for (int c = 0; c < ga.cols; ++c) ga.at(r0 + r, c) += go.at(r, c);
                        });
                    });
    }

    Var slice_cols(Var a, int c0, int n) {
        if (c0 < 0 || n < 0 || c0 + n > a.cols) throw ShapeError("slice_cols out of range");
        return make(a.rows, n, {a},
                    [c0, n](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        for (int r = 0; r < x.rows; ++r)
                            for (int c = 0; c < n; ++c) o.at(r, c) = x.at(r, c0 + c);
                    },
                    [c0, n](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (int r = 0; r < ga.rows; ++r)
                                for (int c = 0; c < n; ++c) ga.at(r, c0 + c) += go.at(r, c);
                        });
                    });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows of nothing");
        int cols = parts[0].cols;
        int rows = 0;
        for (const auto& p : parts) {
            if (p.cols != cols) throw ShapeError("concat_rows column mismatch");
            rows += p.rows;
        }
        Node n;
        n.val = Mat<S>(rows, cols);
        for (const auto& p : parts) n.parents.push_back(p.id);
        n.fwd = [](Graph& g, int out, const int* p, int np) {
            auto& o = g.nodes_[out].val;
            int r0 = 0;
            for (int i = 0; i < np; ++i) {
                const auto& x = g.nodes_[p[i]].val;
                for (int r = 0; r < x.rows; ++r)
                    for (int c = 0; c < x.cols; ++c) o.at(r0 + r, c) = x.at(r, c);
                r0 += x.rows;
            }
        };
        n.bwd = [](Graph& g, int out, const int* p, int np) {
            const auto& go = g.nodes_[out].grad;
            int r0 = 0;
            for (int i = 0; i < np; ++i) {
                int pr = g.nodes_[p[i]].val.rows;
                int base = r0;
                g.accum(p[i], [&](Mat<S>& ga) {
                    for (int r = 0; r < pr; ++r)
                        for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += go.at(base + r, c);
                });
                r0 += pr;
            }
        };
        return push_multi(std::move(n));
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols of nothing");
        int rows = parts[0].rows;
        int cols = 0;
        for (const auto& p : parts) {
            if (p.rows != rows) throw ShapeError("concat_cols row mismatch");
            cols += p.cols;
        }
        Node n;
        n.val = Mat<S>(rows, cols);
        for (const auto& p : parts) n.parents.push_back(p.id);
        n.fwd = [](Graph& g, int out, const int* p, int np) {
            auto& o = g.nodes_[out].val;
            int c0 = 0;
            for (int i = 0; i < np; ++i) {
                const auto& x = g.nodes_[p[i]].val;
                for (int r = 0; r < x.rows; ++r)
                    for (int c = 0; c < x.cols; ++c) o.at(r, c0 + c) = x.at(r, c);
                c0 += x.cols;
            }
        };
        n.bwd = [](Graph& g, int out, const int* p, int np) {
            const auto& go = g.nodes_[out].grad;
            int c0 = 0;
            for (int i = 0; i < np; ++i) {
                int pc = g.nodes_[p[i]].val.cols;
                int base = c0;
                g.accum(p[i], [&](Mat<S>& ga) {
                    for (int r = 0; r < ga.rows; ++r)
                        for (int c = 0; c < pc; ++c) ga.at(r, c) += go.at(r, base + c);
                });
                c0 += pc;
            }
        };
        return push_multi(std::move(n));
    }

    // Row gather (embedding lookup). ids are fixed at build time.
    Var gather_rows(Var table, std::vector<int> ids) {
        for (int id : ids)
            if (id < 0 || id >= table.rows) throw ShapeError("gather_rows id out of range");
        int n = static_cast<int>(ids.size());
        auto idsp = std::make_shared<std::vector<int>>(std::move(ids));
        return make(n, table.cols, {table},
                    [idsp, n](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& t = g.nodes_[p[0]].val;
                        for (int r = 0; r < n; ++r)
                            for (int c = 0; c < t.cols; ++c) o.at(r, c) = t.at((*idsp)[r], c);
                    },
                    [idsp, n](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (int r = 0; r < n; ++r)
                                for (int c = 0; c < ga.cols; ++c)
                                    ga.at((*idsp)[r], c) += go.at(r, c);
                        });
                    });
    }

    // --- normalization / attention pieces -------------------------------

    // Row softmax restricted to mask-true entries; masked entries are exactly
    // zero in the output and receive exactly zero gradient. A row must have at
    // least one admissible entry.
    Var softmax_rows(Var a, const Mask& mask) {
        if (mask.rows != a.rows || mask.cols != a.cols)
            throw ShapeError("softmax mask " + shape_str(mask.rows, mask.cols) + " vs " +
                             shape_str(a.rows, a.cols));
        for (int r = 0; r < mask.rows; ++r) {
            bool any = false;
            for (int c = 0; c < mask.cols; ++c) any = any || mask.at(r, c);
            if (!any) throw ShapeError("softmax row with no admissible entries");
        }
        auto mp = std::make_shared<Mask>(mask);
        return make(a.rows, a.cols, {a},
                    [mp](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& x = g.nodes_[p[0]].val;
                        for (int r = 0; r < x.rows; ++r) {
                            S mx = S(0);
                            bool first = true;
                            for (int c = 0; c < x.cols; ++c)
                                if (mp->at(r, c)) {
                                    if (first || x.at(r, c) > mx) mx = x.at(r, c);
                                    first = false;
                                }
                            S sum = S(0);
                            for (int c = 0; c < x.cols; ++c) {
                                if (mp->at(r, c)) {
                                    S e = std::exp(x.at(r, c) - mx);
                                    o.at(r, c) = e;
                                    sum += e;
                                } else {
                                    o.at(r, c) = S(0);
                                }
                            }
                            for (int c = 0; c < x.cols; ++c) o.at(r, c) /= sum;
                        }
                    },
                    [mp](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        const auto& s = g.nodes_[out].val;
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (int r = 0; r < ga.rows; ++r) {
                                S dot = S(0);
                                for (int c = 0; c < ga.cols; ++c)
                                    if (mp->at(r, c)) dot += go.at(r, c) * s.at(r, c);
                                for (int c = 0; c < ga.cols; ++c)
                                    if (mp->at(r, c))
                                        ga.at(r, c) += s.at(r, c) * (go.at(r, c) - dot);
                            }
                        });
                    });
    }

    Var layer_norm_rows(Var x, Var gamma, Var beta, S eps = S(1e-5)) {
        if (gamma.rows != 1 || gamma.cols != x.cols || beta.rows != 1 || beta.cols != x.cols)
            throw ShapeError("layer_norm gamma/beta must be 1x" + std::to_string(x.cols));
        return make(x.rows, x.cols, {x, gamma, beta},
                    [eps](Graph& g, int out, const int* p) {
                        auto& o = g.nodes_[out].val;
                        const auto& xv = g.nodes_[p[0]].val;
                        const auto& ga = g.nodes_[p[1]].val;
                        const auto& be = g.nodes_[p[2]].val;
                        int d = xv.cols;
                        for (int r = 0; r < xv.rows; ++r) {
                            S mean = S(0);
                            for (int c = 0; c < d; ++c) mean += xv.at(r, c);
                            mean /= S(d);
                            S var = S(0);
                            for (int c = 0; c < d; ++c) {
                                S dv = xv.at(r, c) - mean;
                                var += dv * dv;
                            }
                            var /= S(d);
                            S inv = S(1) / std::sqrt(var + eps);
                            for (int c = 0; c < d; ++c)
                                o.at(r, c) = (xv.at(r, c) - mean) * inv * ga.a[c] + be.a[c];
                        }
                    },
                    [eps](Graph& g, int out, const int* p) {
                        const auto& go = g.nodes_[out].grad;
                        const auto& xv = g.nodes_[p[0]].val;
                        const auto& ga = g.nodes_[p[1]].val;
                        int d = xv.cols;
                        std::vector<S> xhat(static_cast<size_t>(d));
                        for (int r = 0; r < xv.rows; ++r) {
                            S mean = S(0);
                            for (int c = 0; c < d; ++c) mean += xv.at(r, c);
                            mean /= S(d);
                            S var = S(0);
                            for (int c = 0; c < d; ++c) {
                                S dv = xv.at(r, c) - mean;
                                var += dv * dv;
                            }
                            var /= S(d);
                            S inv = S(1) / std::sqrt(var + eps);
                            for (int c = 0; c < d; ++c) xhat[c] = (xv.at(r, c) - mean) * inv;
                            g.accum(p[1], [&](Mat<S>& gg) {
                                for (int c = 0; c < d; ++c) gg.a[c] += go.at(r, c) * xhat[c];
                            });
                            g.accum(p[2], [&](Mat<S>& gb) {
                                for (int c = 0; c < d; ++c) gb.a[c] += go.at(r, c);
                            });
                            g.accum(p[0], [&](Mat<S>& gx) {
                                S m1 = S(0), m2 = S(0);
                                for (int c = 0; c < d; ++c) {
                                    S h = go.at(r, c) * ga.a[c];
                                    m1 += h;
                                    m2 += h * xhat[c];
                                }
                                m1 /= S(d);
                                m2 /= S(d);
                                for (int c = 0; c < d; ++c) {
                                    S h = go.at(r, c) * ga.a[c];
                                    gx.at(r, c) += (h - m1 - xhat[c] * m2) * inv;
                                }
                            });
                        }
                    });
    }

    // --- reductions / losses --------------------------------------------

    Var sum_all(Var a) {
        return make(1, 1, {a},
                    [](Graph& g, int out, const int* p) {
                        const auto& x = g.nodes_[p[0]].val;
                        S s = S(0);
                        for (S v : x.a) s += v;
                        g.nodes_[out].val.a[0] = s;
                    },
                    [](Graph& g, int out, const int* p) {
                        S go = g.nodes_[out].grad.a[0];
                        g.accum(p[0], [&](Mat<S>& ga) {
                            for (auto& v : ga.a) v += go;
                        });
                    });
    }

    Var mean_all(Var a) {
        return scale(sum_all(a), S(1) / (S(a.rows) * S(a.cols)));
    }

    // Mean cross-entropy over mask-true rows of logits against target ids.
    // Returns exact 0 (constant) when no row is masked in.
    Var cross_entropy_rows(Var logits, const std::vector<int>& targets,
                           const std::vector<uint8_t>& mask) {
        if (static_cast<int>(targets.size()) != logits.rows ||
            static_cast<int>(mask.size()) != logits.rows)
            throw ShapeError("cross_entropy targets/mask length mismatch");
        int n_active = 0;
        for (auto m : mask) n_active += m ? 1 : 0;
        if (n_active == 0) return scalar_const(S(0));
        for (int r = 0; r < logits.rows; ++r)
            if (mask[r] && (targets[r] < 0 || targets[r] >= logits.cols))
                throw ShapeError("cross_entropy target out of range");
        auto tp = std::make_shared<std::vector<int>>(targets);
        auto mp = std::make_shared<std::vector<uint8_t>>(mask);
        return make(1, 1, {logits},
                    [tp, mp, n_active](Graph& g, int out, const int* p) {
                        const auto& x = g.nodes_[p[0]].val;
                        S total = S(0);
                        for (int r = 0; r < x.rows; ++r) {
                            if (!(*mp)[r]) continue;
                            S mx = x.at(r, 0);
                            for (int c = 1; c < x.cols; ++c)
                                if (x.at(r, c) > mx) mx = x.at(r, c);
                            S lse = S(0);
                            for (int c = 0; c < x.cols; ++c) lse += std::exp(x.at(r, c) - mx);
                            lse = std::log(lse) + mx;
                            total += lse - x.at(r, (*tp)[r]);
                        }
                        g.nodes_[out].val.a[0] = total / S(n_active);
                    },
                    [tp, mp, n_active](Graph& g, int out, const int* p) {
                        S go = g.nodes_[out].grad.a[0];
                        const auto& x = g.nodes_[p[0]].val;
                        g.accum(p[0], [&](Mat<S>& gx) {
                            for (int r = 0; r < x.rows; ++r) {
                                if (!(*mp)[r]) continue;
                                S mx = x.at(r, 0);
                                for (int c = 1; c < x.cols; ++c)
                                    if (x.at(r, c) > mx) mx = x.at(r, c);
                                S sum = S(0);
                                for (int c = 0; c < x.cols; ++c) sum += std::exp(x.at(r, c) - mx);
                                for (int c = 0; c < x.cols; ++c) {
                                    S pr = std::exp(x.at(r, c) - mx) / sum;
                                    S delta = (c == (*tp)[r]) ? S(1) : S(0);
                                    gx.at(r, c) += go * (pr - delta) / S(n_active);
                                }
                            }
                        });
                    });
    }

    Var detach(Var a) { return constant(nodes_[a.id].val); }

    // --- execution ------------------------------------------------------

    // Replay all forward closures in tape order, re-reading bound inputs.
    void recompute() {
        for (int i = 0; i < static_cast<int>(nodes_.size()); ++i) {
            Node& n = nodes_[i];
            if (n.src) {
                n.val = *n.src;
            } else if (n.fwd) {
                n.fwd(*this, i, n.parents.data(), static_cast<int>(n.parents.size()));
            }
        }
    }

    // Reverse sweep from a scalar loss. Accumulates leaf gradients into their
    // grad sinks (+=). Graph-internal grads are reset on each call.
    void backward(Var loss) {
        if (loss.rows != 1 || loss.cols != 1) throw ShapeError("backward needs a 1x1 loss");
        for (auto& n : nodes_) {
            if (n.needs_grad) {
                if (n.grad.rows != n.val.rows || n.grad.cols != n.val.cols)
                    n.grad = Mat<S>(n.val.rows, n.val.cols);
                else
                    n.grad.fill(S(0));
            }
        }
        if (!nodes_[loss.id].needs_grad) return;  // nothing trainable feeds the loss
        nodes_[loss.id].grad.a[0] = S(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.needs_grad) continue;
            if (n.bwd) n.bwd(*this, i, n.parents.data(), static_cast<int>(n.parents.size()));
        }
        for (auto& n : nodes_) {
            if (n.grad_sink && n.needs_grad) {
                for (size_t i = 0; i < n.grad.a.size(); ++i) n.grad_sink->a[i] += n.grad.a[i];
            }
        }
    }

    S scalar_value(Var v) const {
        if (v.rows != 1 || v.cols != 1) throw ShapeError("scalar_value needs 1x1");
        return nodes_[v.id].val.a[0];
    }

  private:
    struct Node {
        Mat<S> val;
        Mat<S> grad;
        bool needs_grad = false;
        std::vector<int> parents;
        std::function<void(Graph&, int, const int*, int)> fwd;
        std::function<void(Graph&, int, const int*, int)> bwd;
        const Mat<S>* src = nullptr;
        Mat<S>* grad_sink = nullptr;
    };

    static void check_same(Var a, Var b, const char* op) {
        if (a.rows != b.rows || a.cols != b.cols)
            throw ShapeError(std::string(op) + " " + shape_str(a.rows, a.cols) + " vs " +
                             shape_str(b.rows, b.cols));
    }

    static void mm(const Mat<S>& a, const Mat<S>& b, Mat<S>& c) {
        c.fill(S(0));
        for (int i = 0; i < a.rows; ++i) {
            const S* ai = a.row(i);
            S* ci = c.row(i);
            for (int k = 0; k < a.cols; ++k) {
                S aik = ai[k];
                if (aik == S(0)) continue;
                const S* bk = b.row(k);
                for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
            }
        }
    }

    static S gelu_fwd(S x) {
        const S c = S(0.7978845608028654);  // sqrt(2/pi)
        S u = c * (x + S(0.044715) * x * x * x);
        return S(0.5) * x * (S(1) + std::tanh(u));
    }

    static S gelu_bwd(S x) {
        const S c = S(0.7978845608028654);
        S u = c * (x + S(0.044715) * x * x * x);
        S t = std::tanh(u);
        S du = c * (S(1) + S(3) * S(0.044715) * x * x);
        return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
    }

    template <class Fn>
    void accum(int parent, Fn&& fn) {
        Node& p = nodes_[parent];
        if (!p.needs_grad) return;
        fn(p.grad);
    }

    Var push(Node&& n) {
        nodes_.push_back(std::move(n));
        Node& nb = nodes_.back();
        int id = static_cast<int>(nodes_.size()) - 1;
        if (nb.needs_grad && (nb.grad.rows != nb.val.rows || nb.grad.cols != nb.val.cols))
            nb.grad = Mat<S>(nb.val.rows, nb.val.cols);
        return Var{id, nb.val.rows, nb.val.cols};
    }

    Var push_multi(Node&& n) {
        for (int p : n.parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
        Var v = push(std::move(n));
        nodes_[v.id].fwd(*this, v.id, nodes_[v.id].parents.data(),
                         static_cast<int>(nodes_[v.id].parents.size()));
        return v;
    }

    Var make(int rows, int cols, std::initializer_list<Var> parents,
             std::function<void(Graph&, int, const int*)> fwd,
             std::function<void(Graph&, int, const int*)> bwd) {
        Node n;
        n.val = Mat<S>(rows, cols);
        for (const auto& p : parents) {
            n.parents.push_back(p.id);
            n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
        }
        n.fwd = [f = std::move(fwd)](Graph& g, int out, const int* p, int) { f(g, out, p); };
        n.bwd = [f = std::move(bwd)](Graph& g, int out, const int* p, int) { f(g, out, p); };
        Var v = push(std::move(n));
        nodes_[v.id].fwd(*this, v.id, nodes_[v.id].parents.data(),
                         static_cast<int>(nodes_[v.id].parents.size()));
        return v;
    }

    std::vector<Node> nodes_;
};

}  // namespace dvlm
