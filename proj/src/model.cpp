#include "simplexlm/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "simplexlm/errors.hpp"

namespace simplexlm {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_finite(const Matrix& m, const char* name) {
    if (!all_finite(m)) {
        throw NumericError(std::string("non-finite values in tensor: ") + name);
    }
}

struct LnTrace {
    Matrix xhat;
    std::vector<double> rstd;
};

// y = g * xhat + b, xhat = (x - mu) / sqrt(var + eps), per row.
Matrix layer_norm(const Matrix& x, const Tensor32& g, const Tensor32& b, LnTrace* tr) {
    const int rows = x.rows, d = x.cols;
    Matrix y(rows, d);
    if (tr) {
        tr->xhat = Matrix(rows, d);
        tr->rstd.assign(static_cast<size_t>(rows), 0.0);
    }
    for (int i = 0; i < rows; ++i) {
        const double* xr = x.row(i);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xr[j] - mu;
            var += c * c;
        }
        var /= d;
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        double* yr = y.row(i);
        double* xh = tr ? tr->xhat.row(i) : nullptr;
        for (int j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * rstd;
            if (xh) xh[j] = h;
            yr[j] = static_cast<double>(g.v[j]) * h + static_cast<double>(b.v[j]);
        }
        if (tr) tr->rstd[i] = rstd;
    }
    return y;
}

// dx from dy given the forward trace; accumulates dg/db.
Matrix layer_norm_backward(const Matrix& dy, const LnTrace& tr, const Tensor32& g,
                           Matrix& dg, Matrix& db) {
    const int rows = dy.rows, d = dy.cols;
    Matrix dx(rows, d);
    for (int i = 0; i < rows; ++i) {
        const double* dyr = dy.row(i);
        const double* xh = tr.xhat.row(i);
        double* dgr = dg.row(0);
        double* dbr = db.row(0);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dxh = dyr[j] * static_cast<double>(g.v[j]);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
            dgr[j] += dyr[j] * xh[j];
            dbr[j] += dyr[j];
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        const double rstd = tr.rstd[i];
        double* dxr = dx.row(i);
        for (int j = 0; j < d; ++j) {
            const double dxh = dyr[j] * static_cast<double>(g.v[j]);
            dxr[j] = rstd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    return dx;
}

void add_bias(Matrix& m, const Tensor32& b) {
    for (int i = 0; i < m.rows; ++i) {
        double* row = m.row(i);
        for (int j = 0; j < m.cols; ++j) {
            row[j] += static_cast<double>(b.v[j]);
        }
    }
}

void accumulate_colsum(const Matrix& d, Matrix& out) {
    for (int i = 0; i < d.rows; ++i) {
        const double* r = d.row(i);
        double* o = out.row(0);
        for (int j = 0; j < d.cols; ++j) {
            o[j] += r[j];
        }
    }
}

struct LayerTrace {
    LnTrace ln1, ln2;
    Matrix a;    // post-LN1 input to attention
    Matrix q, k, vv;
    std::vector<Matrix> probs; // per head, L x L
    Matrix z;    // attention mix, pre output projection
    Matrix aff;  // post-LN2 input to FFN
    Matrix pre;  // FFN pre-activation
    Matrix act;  // FFN post-ReLU
};

struct Trace {
    std::vector<LayerTrace> layers;
    LnTrace lnf;
    Matrix hf;
};

// Residual stream through all layers; returns the final pre-head hidden
// states of every row.
Matrix run_transformer(const DenoiserParams& p, Matrix h, const BlockMask& mask,
                       Trace* tr) {
    const ModelDims& dims = p.dims;
    const int rows = h.rows;
    const int d = dims.d_model;
    const int nh = dims.n_heads;
    const int dh = dims.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (mask.size != rows) {
        throw ContractError("forward: mask size does not match layout rows");
    }
    if (tr) {
        tr->layers.resize(static_cast<size_t>(dims.n_layers));
    }

    Matrix q, k, vv, z, o, aff, pre, act, f2;
    for (int l = 0; l < dims.n_layers; ++l) {
        const auto& lp = p.layer(l);
        LayerTrace* lt = tr ? &tr->layers[static_cast<size_t>(l)] : nullptr;

        Matrix a = layer_norm(h, lp.ln1_g, lp.ln1_b, lt ? &lt->ln1 : nullptr);
        matmul(a, lp.wq, q);
        add_bias(q, lp.bq);
        matmul(a, lp.wk, k);
        add_bias(k, lp.bk);
        matmul(a, lp.wv, vv);
        add_bias(vv, lp.bv);

        z = Matrix(rows, d);
        std::vector<Matrix> probs(static_cast<size_t>(nh));
        for (int head = 0; head < nh; ++head) {
            const int off = head * dh;
            Matrix& pmat = probs[static_cast<size_t>(head)];
            pmat = Matrix(rows, rows);
            for (int i = 0; i < rows; ++i) {
                double* prow = pmat.row(i);
                const double* qi = q.row(i) + off;
                double mx = kNegInf;
                for (int j = 0; j < rows; ++j) {
                    if (!mask.at(i, j)) {
                        prow[j] = kNegInf;
                        continue;
                    }
                    const double* kj = k.row(j) + off;
                    double s = 0.0;
                    for (int m = 0; m < dh; ++m) {
                        s += qi[m] * kj[m];
                    }
                    s *= scale;
                    prow[j] = s;
                    mx = s > mx ? s : mx;
                }
                double sum = 0.0;
                for (int j = 0; j < rows; ++j) {
                    if (prow[j] == kNegInf) {
                        prow[j] = 0.0;
                    } else {
                        prow[j] = std::exp(prow[j] - mx);
                        sum += prow[j];
                    }
                }
                const double inv = 1.0 / sum;
                double* zi = z.row(i) + off;
                for (int j = 0; j < rows; ++j) {
                    prow[j] *= inv;
                }
                for (int m = 0; m < dh; ++m) {
                    zi[m] = 0.0;
                }
                for (int j = 0; j < rows; ++j) {
                    const double pij = prow[j];
                    if (pij == 0.0) continue;
                    const double* vj = vv.row(j) + off;
                    for (int m = 0; m < dh; ++m) {
                        zi[m] += pij * vj[m];
                    }
                }
            }
        }

        matmul(z, lp.wo, o);
        add_bias(o, lp.bo);
        for (size_t i = 0; i < h.v.size(); ++i) {
            h.v[i] += o.v[i];
        }

        aff = layer_norm(h, lp.ln2_g, lp.ln2_b, lt ? &lt->ln2 : nullptr);
        matmul(aff, lp.w1, pre);
        add_bias(pre, lp.b1);
        act = pre;
        for (double& x : act.v) {
            x = x > 0.0 ? x : 0.0;
        }
        matmul(act, lp.w2, f2);
        add_bias(f2, lp.b2);
        for (size_t i = 0; i < h.v.size(); ++i) {
            h.v[i] += f2.v[i];
        }
        check_finite(h, ("layer." + std::to_string(l)).c_str());

        if (lt) {
            lt->a = std::move(a);
            lt->q = std::move(q);
            lt->k = std::move(k);
            lt->vv = std::move(vv);
            lt->probs = std::move(probs);
            lt->z = std::move(z);
            lt->aff = std::move(aff);
            lt->pre = std::move(pre);
            lt->act = std::move(act);
            q = Matrix();
            k = Matrix();
            vv = Matrix();
            z = Matrix();
            aff = Matrix();
            pre = Matrix();
            act = Matrix();
        }
    }

    Matrix hf = layer_norm(h, p.lnf_g, p.lnf_b, tr ? &tr->lnf : nullptr);
    if (tr) {
        tr->hf = hf;
    }
    return hf;
}

// logits = hf[sel] * W_out + b_out (tied: * emb_ctx^T).
Matrix output_head(const DenoiserParams& p, const Matrix& hf, int sel_begin, int sel_count) {
    Matrix sel(sel_count, hf.cols);
    for (int i = 0; i < sel_count; ++i) {
        std::memcpy(sel.row(i), hf.row(sel_begin + i), sizeof(double) * hf.cols);
    }
    Matrix logits;
    if (p.dims.tie_output) {
        matmul_nt(sel, p.emb_ctx, logits);
    } else {
        matmul(sel, p.w_out, logits);
    }
    add_bias(logits, p.b_out);
    check_finite(logits, "logits");
    return logits;
}

void validate_block_input(const DenoiserParams& p, const ModelInput& in) {
    const ModelDims& dims = p.dims;
    const int ctx = static_cast<int>(in.ctx_tokens.size());
    const int r = in.noisy.rows;
    if (ctx < 1) {
        throw ContractError("forward: context must be non-empty");
    }
    if (r < 1) {
        throw ContractError("forward: noisy block region is empty");
    }
    if (in.noisy.cols != dims.vocab) {
        throw ContractError("forward: noisy logits width does not match vocab");
    }
    if (in.self_cond &&
        (in.self_cond->rows != r || in.self_cond->cols != dims.vocab)) {
        throw ContractError("forward: self-conditioning shape mismatch");
    }
    if (static_cast<int>(in.ctx_positions.size()) != ctx ||
        static_cast<int>(in.block_positions.size()) != r ||
        static_cast<int>(in.block_times.size()) != r) {
        throw ContractError("forward: layout index arrays mismatch");
    }
    if (in.mask.size != ctx + r) {
        throw ContractError("forward: mask size does not match layout");
    }
    for (int pos : in.ctx_positions) {
        if (pos < 0 || pos >= dims.max_len) {
            throw ContractError("forward: context position exceeds max_len");
        }
    }
    for (int pos : in.block_positions) {
        if (pos < 0 || pos >= dims.max_len) {
            throw ContractError("forward: block position exceeds max_len");
        }
    }
    for (TokenId id : in.ctx_tokens) {
        if (id < 0 || id >= dims.vocab) {
            throw DomainError("forward: context token id out of range");
        }
    }
}

void add_param_row(double* dst, const Tensor32& t, int row, int d) {
    const float* src = t.row(row);
    for (int j = 0; j < d; ++j) {
        dst[j] += static_cast<double>(src[j]);
    }
}

} // namespace

int ModelDims::time_index(int t) const {
    if (t < 0) {
        throw DomainError("time_index: negative timestep");
    }
    int idx = (t - t % time_quant) / time_quant;
    const int last = time_entries() - 1;
    return idx > last ? last : idx;
}

void ModelDims::validate() const {
    if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || max_len < 1) {
        throw ConfigError("model: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model: d_model must be divisible by n_heads");
    }
    if (total_steps < 1 || time_quant < 1) {
        throw ConfigError("model: total_steps and time_quant must be >= 1");
    }
    if (!(input_temp > 0.0)) {
        throw ConfigError("model: input_temp must be > 0");
    }
}

DenoiserParams allocate_params(const ModelDims& dims) {
    dims.validate();
    DenoiserParams p;
    p.dims = dims;
    const int d = dims.d_model;
    const int v = dims.vocab;
    const int f = dims.ffn();
    const int te = dims.time_entries();

    p.emb_ctx = Tensor32(v, d);
    p.w_diff = Tensor32(v, d);
    p.w_pred = Tensor32(v, d);
    p.emb_pos = Tensor32(dims.max_len, d);
    p.emb_diff_time = Tensor32(te, d);
    p.emb_ctx_time = Tensor32(te, d);
    p.layers.resize(static_cast<size_t>(dims.n_layers));
    for (auto& lay : p.layers) {
        lay.ln1_g = Tensor32(1, d);
        lay.ln1_b = Tensor32(1, d);
        lay.wq = Tensor32(d, d);
        lay.bq = Tensor32(1, d);
        lay.wk = Tensor32(d, d);
        lay.bk = Tensor32(1, d);
        lay.wv = Tensor32(d, d);
        lay.bv = Tensor32(1, d);
        lay.wo = Tensor32(d, d);
        lay.bo = Tensor32(1, d);
        lay.ln2_g = Tensor32(1, d);
        lay.ln2_b = Tensor32(1, d);
        lay.w1 = Tensor32(d, f);
        lay.b1 = Tensor32(1, f);
        lay.w2 = Tensor32(f, d);
        lay.b2 = Tensor32(1, d);
    }
    p.lnf_g = Tensor32(1, d);
    p.lnf_b = Tensor32(1, d);
    if (!dims.tie_output) {
        p.w_out = Tensor32(d, v);
    }
    p.b_out = Tensor32(1, v);
    return p;
}

DenoiserParams init_params(const ModelDims& dims, uint64_t seed) {
    DenoiserParams p = allocate_params(dims);
    Rng rng = Rng::stream(seed, "init");
    for_each_tensor(p, [&](const std::string& name, Tensor32& t) {
        const size_t dot = name.rfind('.');
        const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
        if (leaf.size() >= 2 && leaf.compare(0, 2, "ln") == 0) {
            const float fill = leaf.back() == 'g' ? 1.0f : 0.0f;
            for (auto& x : t.v) x = fill;
            return;
        }
        if (!leaf.empty() && leaf[0] == 'b') {
            for (auto& x : t.v) x = 0.0f;
            return;
        }
        // Near-zero output head keeps the initial predictive distribution
        // essentially uniform (cross-entropy ~ ln V).
        const double std_dev = leaf == "w_out" ? 1e-3 : 0.02;
        for (auto& x : t.v) {
            x = static_cast<float>(std_dev * rng.gaussian());
        }
    });
    return p;
}

ParamGrads make_grads(const ModelDims& dims) {
    // Mirror the parameter shapes with double storage.
    DenoiserParams proto = allocate_params(dims);
    ParamGrads g;
    g.dims = dims;
    auto shape = [](const Tensor32& t) { return Matrix(t.rows, t.cols); };
    g.emb_ctx = shape(proto.emb_ctx);
    g.w_diff = shape(proto.w_diff);
    g.w_pred = shape(proto.w_pred);
    g.emb_pos = shape(proto.emb_pos);
    g.emb_diff_time = shape(proto.emb_diff_time);
    g.emb_ctx_time = shape(proto.emb_ctx_time);
    g.layers.resize(proto.layers.size());
    for (size_t l = 0; l < proto.layers.size(); ++l) {
        const auto& sp = proto.layers[l];
        auto& dg = g.layers[l];
        dg.ln1_g = shape(sp.ln1_g);
        dg.ln1_b = shape(sp.ln1_b);
        dg.wq = shape(sp.wq);
        dg.bq = shape(sp.bq);
        dg.wk = shape(sp.wk);
        dg.bk = shape(sp.bk);
        dg.wv = shape(sp.wv);
        dg.bv = shape(sp.bv);
        dg.wo = shape(sp.wo);
        dg.bo = shape(sp.bo);
        dg.ln2_g = shape(sp.ln2_g);
        dg.ln2_b = shape(sp.ln2_b);
        dg.w1 = shape(sp.w1);
        dg.b1 = shape(sp.b1);
        dg.w2 = shape(sp.w2);
        dg.b2 = shape(sp.b2);
    }
    g.lnf_g = shape(proto.lnf_g);
    g.lnf_b = shape(proto.lnf_b);
    if (!dims.tie_output) {
        g.w_out = shape(proto.w_out);
    }
    g.b_out = shape(proto.b_out);
    return g;
}

void zero_grads(ParamGrads& g) {
    for_each_tensor(g, [](const std::string&, Matrix& t) { t.zero(); });
}

size_t param_count(const DenoiserParams& p) {
    size_t n = 0;
    for_each_tensor(const_cast<DenoiserParams&>(p),
                    [&](const std::string&, Tensor32& t) { n += t.size(); });
    return n;
}

uint64_t params_checksum(const DenoiserParams& p) {
    uint64_t h = 0xcbf29ce484222325ull;
    for_each_tensor(const_cast<DenoiserParams&>(p), [&](const std::string&, Tensor32& t) {
        const unsigned char* bytes = reinterpret_cast<const unsigned char*>(t.v.data());
        for (size_t i = 0; i < t.v.size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    });
    return h;
}

ModelInput make_block_input(const std::vector<TokenId>& ctx_tokens, Matrix noisy,
                            const Matrix* self_cond, int t, int ctx_time_q) {
    ModelInput in;
    in.ctx_tokens = ctx_tokens;
    const int ctx = static_cast<int>(ctx_tokens.size());
    const int b = noisy.rows;
    in.ctx_positions.resize(static_cast<size_t>(ctx));
    for (int i = 0; i < ctx; ++i) {
        in.ctx_positions[i] = i;
    }
    in.block_positions.resize(static_cast<size_t>(b));
    in.block_times.assign(static_cast<size_t>(b), t);
    for (int i = 0; i < b; ++i) {
        in.block_positions[i] = ctx + i;
    }
    in.ctx_time = ctx_time_q;
    in.noisy = std::move(noisy);
    in.self_cond = self_cond;
    in.mask = build_block_mask(ctx, 1, b);
    return in;
}

Matrix build_input_hidden(const DenoiserParams& p, const ModelInput& in) {
    validate_block_input(p, in);
    const ModelDims& dims = p.dims;
    const int ctx = static_cast<int>(in.ctx_tokens.size());
    const int r = in.noisy.rows;
    const int d = dims.d_model;
    Matrix h(ctx + r, d);

    const int ctx_tidx = dims.time_index(in.ctx_time);
    for (int i = 0; i < ctx; ++i) {
        double* row = h.row(i);
        add_param_row(row, p.emb_ctx, in.ctx_tokens[i], d);
        add_param_row(row, p.emb_pos, in.ctx_positions[i], d);
        add_param_row(row, p.emb_ctx_time, ctx_tidx, d);
    }

    const bool pred_uniform_absent = (in.self_cond == nullptr) && dims.absent_uniform;
    for (int i = 0; i < r; ++i) {
        double* row = h.row(ctx + i);
        // W_diff^T sm(noisy row)
        std::vector<double> sm(in.noisy.row(i), in.noisy.row(i) + dims.vocab);
        for (double& x : sm) x /= dims.input_temp;
        softmax_row(sm.data(), dims.vocab);
        for (int m = 0; m < dims.vocab; ++m) {
            const float* wrow = p.w_diff.row(m);
            const double w = sm[m];
            for (int j = 0; j < d; ++j) {
                row[j] += w * static_cast<double>(wrow[j]);
            }
        }
        if (in.self_cond) {
            std::vector<double> sp(in.self_cond->row(i), in.self_cond->row(i) + dims.vocab);
            for (double& x : sp) x /= dims.input_temp;
            softmax_row(sp.data(), dims.vocab);
            for (int m = 0; m < dims.vocab; ++m) {
                const float* wrow = p.w_pred.row(m);
                const double w = sp[m];
                for (int j = 0; j < d; ++j) {
                    row[j] += w * static_cast<double>(wrow[j]);
                }
            }
        } else if (pred_uniform_absent) {
            const double w = 1.0 / dims.vocab;
            for (int m = 0; m < dims.vocab; ++m) {
                const float* wrow = p.w_pred.row(m);
                for (int j = 0; j < d; ++j) {
                    row[j] += w * static_cast<double>(wrow[j]);
                }
            }
        }
        add_param_row(row, p.emb_pos, in.block_positions[i], d);
        add_param_row(row, p.emb_diff_time, dims.time_index(in.block_times[i]), d);
    }
    check_finite(h, "input_hidden");
    return h;
}

Matrix denoise_forward(const DenoiserParams& p, const ModelInput& in) {
    Matrix h0 = build_input_hidden(p, in);
    Matrix hf = run_transformer(p, std::move(h0), in.mask, nullptr);
    const int ctx = static_cast<int>(in.ctx_tokens.size());
    return output_head(p, hf, ctx, in.noisy.rows);
}

Matrix ar_forward(const DenoiserParams& p, const TokenSeq& prefix) {
    if (prefix.empty()) {
        throw ContractError("ar_forward: prefix must be non-empty");
    }
    const ModelDims& dims = p.dims;
    const int len = prefix.length();
    if (len > dims.max_len) {
        throw ContractError("ar_forward: prefix exceeds max_len");
    }
    Matrix h(len, dims.d_model);
    for (int i = 0; i < len; ++i) {
        const TokenId id = prefix.ids[i];
        if (id < 0 || id >= dims.vocab) {
            throw DomainError("ar_forward: token id out of range");
        }
        double* row = h.row(i);
        add_param_row(row, p.emb_ctx, id, dims.d_model);
        add_param_row(row, p.emb_pos, i, dims.d_model);
    }
    check_finite(h, "input_hidden");
    const BlockMask mask = causal_mask(len);
    Matrix hf = run_transformer(p, std::move(h), mask, nullptr);
    return output_head(p, hf, 0, len);
}

namespace {

// Shared backward pass: from dlogits over the selected rows back to the
// input hidden states; parameter grads accumulate into `grads`. Returns
// dH0, the gradient at the embedding-combination stage.
Matrix backward_core(const DenoiserParams& p, const Trace& tr, int sel_begin,
                     const Matrix& dlogits, ParamGrads& grads) {
    const ModelDims& dims = p.dims;
    const int rows = tr.hf.rows;
    const int d = dims.d_model;
    const int nh = dims.n_heads;
    const int hd = dims.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int sel_count = dlogits.rows;

    Matrix hf_sel(sel_count, d);
    for (int i = 0; i < sel_count; ++i) {
        std::memcpy(hf_sel.row(i), tr.hf.row(sel_begin + i), sizeof(double) * d);
    }

    Matrix dhf_sel;
    if (dims.tie_output) {
        matmul(dlogits, p.emb_ctx, dhf_sel);
        matmul_tn(dlogits, hf_sel, grads.emb_ctx, /*accumulate=*/true);
    } else {
        matmul_nt(dlogits, p.w_out, dhf_sel);
        matmul_tn(hf_sel, dlogits, grads.w_out, /*accumulate=*/true);
    }
    accumulate_colsum(dlogits, grads.b_out);

    Matrix dhf(rows, d);
    for (int i = 0; i < sel_count; ++i) {
        std::memcpy(dhf.row(sel_begin + i), dhf_sel.row(i), sizeof(double) * d);
    }

    Matrix dh = layer_norm_backward(dhf, tr.lnf, p.lnf_g, grads.lnf_g, grads.lnf_b);

    Matrix df1, dpre, daff, dz, dq, dk, dv, da, tmp;
    for (int l = dims.n_layers - 1; l >= 0; --l) {
        const auto& lp = p.layer(l);
        auto& lg = grads.layer(l);
        const LayerTrace& lt = tr.layers[static_cast<size_t>(l)];

        // FFN branch: h_out = h_mid + W2 relu(W1 ln2(h_mid) + b1) + b2
        matmul_nt(dh, lp.w2, df1);
        matmul_tn(lt.act, dh, lg.w2, true);
        accumulate_colsum(dh, lg.b2);
        dpre = df1;
        for (size_t i = 0; i < dpre.v.size(); ++i) {
            if (lt.pre.v[i] <= 0.0) {
                dpre.v[i] = 0.0;
            }
        }
        matmul_nt(dpre, lp.w1, daff);
        matmul_tn(lt.aff, dpre, lg.w1, true);
        accumulate_colsum(dpre, lg.b1);
        Matrix dh_mid = layer_norm_backward(daff, lt.ln2, lp.ln2_g, lg.ln2_g, lg.ln2_b);
        for (size_t i = 0; i < dh.v.size(); ++i) {
            dh_mid.v[i] += dh.v[i];
        }

        // Attention branch: h_mid = h_in + Wo z + bo
        matmul_nt(dh_mid, lp.wo, dz);
        matmul_tn(lt.z, dh_mid, lg.wo, true);
        accumulate_colsum(dh_mid, lg.bo);

        dq = Matrix(rows, d);
        dk = Matrix(rows, d);
        dv = Matrix(rows, d);
        for (int head = 0; head < nh; ++head) {
            const int off = head * hd;
            const Matrix& pmat = lt.probs[static_cast<size_t>(head)];
            for (int i = 0; i < rows; ++i) {
                const double* prow = pmat.row(i);
                const double* dzi = dz.row(i) + off;
                // dP row, then softmax backward within the row
                double dot = 0.0;
                std::vector<double> dprow(static_cast<size_t>(rows), 0.0);
                for (int j = 0; j < rows; ++j) {
                    if (prow[j] == 0.0) continue;
                    const double* vj = lt.vv.row(j) + off;
                    double s = 0.0;
                    for (int m = 0; m < hd; ++m) {
                        s += dzi[m] * vj[m];
                    }
                    dprow[j] = s;
                    dot += s * prow[j];
                    // dV_j += P_ij * dZ_i
                    double* dvj = dv.row(j) + off;
                    for (int m = 0; m < hd; ++m) {
                        dvj[m] += prow[j] * dzi[m];
                    }
                }
                double* dqi = dq.row(i) + off;
                for (int j = 0; j < rows; ++j) {
                    if (prow[j] == 0.0) continue;
                    const double ds = prow[j] * (dprow[j] - dot) * scale;
                    const double* kj = lt.k.row(j) + off;
                    double* dkj = dk.row(j) + off;
                    const double* qi = lt.q.row(i) + off;
                    for (int m = 0; m < hd; ++m) {
                        dqi[m] += ds * kj[m];
                        dkj[m] += ds * qi[m];
                    }
                }
            }
        }

        matmul_nt(dq, lp.wq, da);
        matmul_nt(dk, lp.wk, tmp);
        for (size_t i = 0; i < da.v.size(); ++i) da.v[i] += tmp.v[i];
        matmul_nt(dv, lp.wv, tmp);
        for (size_t i = 0; i < da.v.size(); ++i) da.v[i] += tmp.v[i];
        matmul_tn(lt.a, dq, lg.wq, true);
        matmul_tn(lt.a, dk, lg.wk, true);
        matmul_tn(lt.a, dv, lg.wv, true);
        accumulate_colsum(dq, lg.bq);
        accumulate_colsum(dk, lg.bk);
        accumulate_colsum(dv, lg.bv);

        Matrix dh_in = layer_norm_backward(da, lt.ln1, lp.ln1_g, lg.ln1_g, lg.ln1_b);
        for (size_t i = 0; i < dh.v.size(); ++i) {
            dh_in.v[i] += dh_mid.v[i];
        }
        dh = std::move(dh_in);
    }
    return dh;
}

// dlogits rows for cross-entropy: softmax(logits) - onehot(target), zeroed
// where the loss mask is off. Returns the NLL sum and in-loss token count.
LossSums ce_dlogits(const Matrix& logits, const std::vector<TokenId>& targets,
                    const std::vector<uint8_t>& loss_mask, Matrix& dlogits) {
    LossSums sums;
    dlogits = Matrix(logits.rows, logits.cols);
    for (int i = 0; i < logits.rows; ++i) {
        if (!loss_mask.empty() && !loss_mask[static_cast<size_t>(i)]) {
            continue;
        }
        const TokenId target = targets[static_cast<size_t>(i)];
        if (target < 0 || target >= logits.cols) {
            throw DomainError("loss: target id out of range");
        }
        std::vector<double> probs(logits.row(i), logits.row(i) + logits.cols);
        softmax_row(probs.data(), logits.cols);
        const double nll = -std::log(probs[static_cast<size_t>(target)]);
        if (!std::isfinite(nll)) {
            throw NumericError("non-finite values in tensor: loss");
        }
        sums.nll_sum += nll;
        sums.tokens += 1;
        double* drow = dlogits.row(i);
        for (int j = 0; j < logits.cols; ++j) {
            drow[j] = probs[static_cast<size_t>(j)];
        }
        drow[target] -= 1.0;
    }
    return sums;
}

} // namespace

std::vector<double> per_token_nll(const Matrix& logits, const std::vector<TokenId>& targets) {
    if (static_cast<int>(targets.size()) != logits.rows) {
        throw ContractError("per_token_nll: target count does not match rows");
    }
    std::vector<double> out(targets.size());
    for (int i = 0; i < logits.rows; ++i) {
        const TokenId target = targets[static_cast<size_t>(i)];
        if (target < 0 || target >= logits.cols) {
            throw DomainError("per_token_nll: target id out of range");
        }
        std::vector<double> probs(logits.row(i), logits.row(i) + logits.cols);
        softmax_row(probs.data(), logits.cols);
        out[static_cast<size_t>(i)] = -std::log(probs[static_cast<size_t>(target)]);
    }
    return out;
}

LossSums diffusion_loss_and_grads(const DenoiserParams& p, const ModelInput& in,
                                  const std::vector<TokenId>& targets,
                                  const std::vector<uint8_t>& loss_mask,
                                  ParamGrads* grads) {
    const ModelDims& dims = p.dims;
    const int ctx = static_cast<int>(in.ctx_tokens.size());
    const int r = in.noisy.rows;
    if (static_cast<int>(targets.size()) != r) {
        throw ContractError("loss: target count does not match block rows");
    }
    if (!loss_mask.empty() && static_cast<int>(loss_mask.size()) != r) {
        throw ContractError("loss: mask length does not match block rows");
    }

    Trace tr;
    Matrix h0 = build_input_hidden(p, in);
    Matrix hf = run_transformer(p, std::move(h0), in.mask, &tr);
    Matrix logits = output_head(p, hf, ctx, r);

    Matrix dlogits;
    LossSums sums = ce_dlogits(logits, targets, loss_mask, dlogits);
    if (!grads) {
        return sums;
    }

    Matrix dh0 = backward_core(p, tr, ctx, dlogits, *grads);

    // Embedding-combination backward.
    const int d = dims.d_model;
    const int ctx_tidx = dims.time_index(in.ctx_time);
    for (int i = 0; i < ctx; ++i) {
        const double* src = dh0.row(i);
        double* e = grads->emb_ctx.row(in.ctx_tokens[i]);
        double* pp = grads->emb_pos.row(in.ctx_positions[i]);
        double* tt = grads->emb_ctx_time.row(ctx_tidx);
        for (int j = 0; j < d; ++j) {
            e[j] += src[j];
            pp[j] += src[j];
            tt[j] += src[j];
        }
    }
    const bool pred_uniform_absent = (in.self_cond == nullptr) && dims.absent_uniform;
    for (int i = 0; i < r; ++i) {
        const double* src = dh0.row(ctx + i);
        std::vector<double> sm(in.noisy.row(i), in.noisy.row(i) + dims.vocab);
        for (double& x : sm) x /= dims.input_temp;
        softmax_row(sm.data(), dims.vocab);
        for (int m = 0; m < dims.vocab; ++m) {
            double* wrow = grads->w_diff.row(m);
            const double w = sm[m];
            for (int j = 0; j < d; ++j) {
                wrow[j] += w * src[j];
            }
        }
        if (in.self_cond) {
            std::vector<double> sp(in.self_cond->row(i), in.self_cond->row(i) + dims.vocab);
            for (double& x : sp) x /= dims.input_temp;
            softmax_row(sp.data(), dims.vocab);
            for (int m = 0; m < dims.vocab; ++m) {
                double* wrow = grads->w_pred.row(m);
                const double w = sp[m];
                for (int j = 0; j < d; ++j) {
                    wrow[j] += w * src[j];
                }
            }
        } else if (pred_uniform_absent) {
            const double w = 1.0 / dims.vocab;
            for (int m = 0; m < dims.vocab; ++m) {
                double* wrow = grads->w_pred.row(m);
                for (int j = 0; j < d; ++j) {
                    wrow[j] += w * src[j];
                }
            }
        }
        double* pp = grads->emb_pos.row(in.block_positions[i]);
        double* tt = grads->emb_diff_time.row(dims.time_index(in.block_times[i]));
        for (int j = 0; j < d; ++j) {
            pp[j] += src[j];
            tt[j] += src[j];
        }
    }
    return sums;
}

LossSums ar_loss_and_grads(const DenoiserParams& p, const std::vector<TokenId>& tokens,
                           int first_target, const std::vector<uint8_t>& loss_mask,
                           ParamGrads* grads) {
    const int len = static_cast<int>(tokens.size());
    if (len < 2) {
        throw ContractError("ar loss: need at least two tokens");
    }
    if (first_target < 1 || first_target >= len) {
        throw ContractError("ar loss: first_target out of range");
    }
    const ModelDims& dims = p.dims;
    if (len > dims.max_len) {
        throw ContractError("ar loss: sequence exceeds max_len");
    }

    Matrix h(len, dims.d_model);
    for (int i = 0; i < len; ++i) {
        if (tokens[static_cast<size_t>(i)] < 0 ||
            tokens[static_cast<size_t>(i)] >= dims.vocab) {
            throw DomainError("ar loss: token id out of range");
        }
        double* row = h.row(i);
        add_param_row(row, p.emb_ctx, tokens[static_cast<size_t>(i)], dims.d_model);
        add_param_row(row, p.emb_pos, i, dims.d_model);
    }
    check_finite(h, "input_hidden");

    const BlockMask mask = causal_mask(len);
    Trace tr;
    Matrix hf = run_transformer(p, std::move(h), mask, &tr);

    // Predict tokens[first_target..len) from rows first_target-1..len-2.
    const int n_pred = len - first_target;
    Matrix logits = output_head(p, hf, first_target - 1, n_pred);
    std::vector<TokenId> targets(tokens.begin() + first_target, tokens.end());
    std::vector<uint8_t> mask_slice;
    if (!loss_mask.empty()) {
        if (static_cast<int>(loss_mask.size()) != n_pred) {
            throw ContractError("ar loss: mask length mismatch");
        }
        mask_slice = loss_mask;
    }

    Matrix dlogits;
    LossSums sums = ce_dlogits(logits, targets, mask_slice, dlogits);
    if (!grads) {
        return sums;
    }

    Matrix dh0 = backward_core(p, tr, first_target - 1, dlogits, *grads);
    for (int i = 0; i < len; ++i) {
        const double* src = dh0.row(i);
        double* e = grads->emb_ctx.row(tokens[static_cast<size_t>(i)]);
        double* pp = grads->emb_pos.row(i);
        for (int j = 0; j < dims.d_model; ++j) {
            e[j] += src[j];
            pp[j] += src[j];
        }
    }
    return sums;
}

Matrix decode_forward(const DenoiserParams& p, const std::vector<TokenId>& ctx_tokens,
                      const Matrix& noisy, const Matrix* self_cond, int t, int ctx_time_q,
                      CtxCache& cache, bool* ctx_recomputed) {
    const ModelDims& dims = p.dims;
    const int ctx = static_cast<int>(ctx_tokens.size());
    const int b = noisy.rows;
    const int d = dims.d_model;
    const int nh = dims.n_heads;
    const int dh = dims.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (ctx < 1) {
        throw ContractError("decode_forward: context must be non-empty");
    }
    if (ctx + b > dims.max_len) {
        throw ContractError("decode_forward: context plus block exceeds max_len");
    }

    uint64_t sig = 0xcbf29ce484222325ull;
    for (TokenId id : ctx_tokens) {
        sig ^= static_cast<uint64_t>(static_cast<uint32_t>(id));
        sig *= 0x100000001b3ull;
    }

    bool recompute = cache.ctx_time != ctx_time_q || cache.ctx_sig != sig ||
                     static_cast<int>(cache.k.size()) != dims.n_layers;
    if (ctx_recomputed) {
        *ctx_recomputed = recompute;
    }
    if (recompute) {
        // Full causal pass over the context rows, capturing K/V per layer.
        cache.k.assign(static_cast<size_t>(dims.n_layers), Matrix());
        cache.v.assign(static_cast<size_t>(dims.n_layers), Matrix());
        cache.ctx_time = ctx_time_q;
        cache.ctx_sig = sig;
        cache.recompute_count += 1;

        Matrix h(ctx, d);
        const int ctx_tidx = dims.time_index(ctx_time_q);
        for (int i = 0; i < ctx; ++i) {
            const TokenId id = ctx_tokens[static_cast<size_t>(i)];
            if (id < 0 || id >= dims.vocab) {
                throw DomainError("decode_forward: context token id out of range");
            }
            double* row = h.row(i);
            add_param_row(row, p.emb_ctx, id, d);
            add_param_row(row, p.emb_pos, i, d);
            add_param_row(row, p.emb_ctx_time, ctx_tidx, d);
        }
        check_finite(h, "input_hidden");

        Matrix q, k, vv, z, o, aff, pre, f2;
        for (int l = 0; l < dims.n_layers; ++l) {
            const auto& lp = p.layer(l);
            Matrix a = layer_norm(h, lp.ln1_g, lp.ln1_b, nullptr);
            matmul(a, lp.wq, q);
            add_bias(q, lp.bq);
            matmul(a, lp.wk, k);
            add_bias(k, lp.bk);
            matmul(a, lp.wv, vv);
            add_bias(vv, lp.bv);
            cache.k[static_cast<size_t>(l)] = k;
            cache.v[static_cast<size_t>(l)] = vv;

            z = Matrix(ctx, d);
            for (int head = 0; head < nh; ++head) {
                const int off = head * dh;
                std::vector<double> srow(static_cast<size_t>(ctx));
                for (int i = 0; i < ctx; ++i) {
                    const double* qi = q.row(i) + off;
                    double mx = kNegInf;
                    for (int j = 0; j <= i; ++j) {
                        const double* kj = k.row(j) + off;
                        double s = 0.0;
                        for (int m = 0; m < dh; ++m) {
                            s += qi[m] * kj[m];
                        }
                        s *= scale;
                        srow[static_cast<size_t>(j)] = s;
                        mx = s > mx ? s : mx;
                    }
                    double sum = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        srow[static_cast<size_t>(j)] = std::exp(srow[static_cast<size_t>(j)] - mx);
                        sum += srow[static_cast<size_t>(j)];
                    }
                    const double inv = 1.0 / sum;
                    double* zi = z.row(i) + off;
                    for (int m = 0; m < dh; ++m) {
                        zi[m] = 0.0;
                    }
                    for (int j = 0; j <= i; ++j) {
                        const double pij = srow[static_cast<size_t>(j)] * inv;
                        const double* vj = vv.row(j) + off;
                        for (int m = 0; m < dh; ++m) {
                            zi[m] += pij * vj[m];
                        }
                    }
                }
            }
            matmul(z, lp.wo, o);
            add_bias(o, lp.bo);
            for (size_t i = 0; i < h.v.size(); ++i) {
                h.v[i] += o.v[i];
            }
            aff = layer_norm(h, lp.ln2_g, lp.ln2_b, nullptr);
            matmul(aff, lp.w1, pre);
            add_bias(pre, lp.b1);
            for (double& x : pre.v) {
                x = x > 0.0 ? x : 0.0;
            }
            matmul(pre, lp.w2, f2);
            add_bias(f2, lp.b2);
            for (size_t i = 0; i < h.v.size(); ++i) {
                h.v[i] += f2.v[i];
            }
            check_finite(h, ("layer." + std::to_string(l)).c_str());
        }
    }

    // Block rows against the cached context.
    Matrix hb(b, d);
    {
        const bool pred_uniform_absent = (self_cond == nullptr) && dims.absent_uniform;
        if (noisy.cols != dims.vocab) {
            throw ContractError("decode_forward: noisy logits width does not match vocab");
        }
        if (self_cond && (self_cond->rows != b || self_cond->cols != dims.vocab)) {
            throw ContractError("decode_forward: self-conditioning shape mismatch");
        }
        for (int i = 0; i < b; ++i) {
            double* row = hb.row(i);
            std::vector<double> sm(noisy.row(i), noisy.row(i) + dims.vocab);
            for (double& x : sm) x /= dims.input_temp;
            softmax_row(sm.data(), dims.vocab);
            for (int m = 0; m < dims.vocab; ++m) {
                const float* wrow = p.w_diff.row(m);
                const double w = sm[m];
                for (int j = 0; j < d; ++j) {
                    row[j] += w * static_cast<double>(wrow[j]);
                }
            }
            if (self_cond) {
                std::vector<double> sp(self_cond->row(i), self_cond->row(i) + dims.vocab);
                for (double& x : sp) x /= dims.input_temp;
                softmax_row(sp.data(), dims.vocab);
                for (int m = 0; m < dims.vocab; ++m) {
                    const float* wrow = p.w_pred.row(m);
                    const double w = sp[m];
                    for (int j = 0; j < d; ++j) {
                        row[j] += w * static_cast<double>(wrow[j]);
                    }
                }
            } else if (pred_uniform_absent) {
                const double w = 1.0 / dims.vocab;
                for (int m = 0; m < dims.vocab; ++m) {
                    const float* wrow = p.w_pred.row(m);
                    for (int j = 0; j < d; ++j) {
                        row[j] += w * static_cast<double>(wrow[j]);
                    }
                }
            }
            add_param_row(row, p.emb_pos, ctx + i, d);
            add_param_row(row, p.emb_diff_time, dims.time_index(t), d);
        }
        check_finite(hb, "input_hidden");
    }

    Matrix q, k, vv, z, o, aff, pre, f2;
    for (int l = 0; l < dims.n_layers; ++l) {
        const auto& lp = p.layer(l);
        const Matrix& ck = cache.k[static_cast<size_t>(l)];
        const Matrix& cv = cache.v[static_cast<size_t>(l)];

        Matrix a = layer_norm(hb, lp.ln1_g, lp.ln1_b, nullptr);
        matmul(a, lp.wq, q);
        add_bias(q, lp.bq);
        matmul(a, lp.wk, k);
        add_bias(k, lp.bk);
        matmul(a, lp.wv, vv);
        add_bias(vv, lp.bv);

        z = Matrix(b, d);
        const int total = ctx + b;
        std::vector<double> srow(static_cast<size_t>(total));
        for (int head = 0; head < nh; ++head) {
            const int off = head * dh;
            for (int i = 0; i < b; ++i) {
                const double* qi = q.row(i) + off;
                double mx = kNegInf;
                for (int j = 0; j < total; ++j) {
                    const double* kj = j < ctx ? ck.row(j) + off : k.row(j - ctx) + off;
                    double s = 0.0;
                    for (int m = 0; m < dh; ++m) {
                        s += qi[m] * kj[m];
                    }
                    s *= scale;
                    srow[static_cast<size_t>(j)] = s;
                    mx = s > mx ? s : mx;
                }
                double sum = 0.0;
                for (int j = 0; j < total; ++j) {
                    srow[static_cast<size_t>(j)] = std::exp(srow[static_cast<size_t>(j)] - mx);
                    sum += srow[static_cast<size_t>(j)];
                }
                const double inv = 1.0 / sum;
                double* zi = z.row(i) + off;
                for (int m = 0; m < dh; ++m) {
                    zi[m] = 0.0;
                }
                for (int j = 0; j < total; ++j) {
                    const double pij = srow[static_cast<size_t>(j)] * inv;
                    const double* vj = j < ctx ? cv.row(j) + off : vv.row(j - ctx) + off;
                    for (int m = 0; m < dh; ++m) {
                        zi[m] += pij * vj[m];
                    }
                }
            }
        }
        matmul(z, lp.wo, o);
        add_bias(o, lp.bo);
        for (size_t i = 0; i < hb.v.size(); ++i) {
            hb.v[i] += o.v[i];
        }
        aff = layer_norm(hb, lp.ln2_g, lp.ln2_b, nullptr);
        matmul(aff, lp.w1, pre);
        add_bias(pre, lp.b1);
        for (double& x : pre.v) {
            x = x > 0.0 ? x : 0.0;
        }
        matmul(pre, lp.w2, f2);
        add_bias(f2, lp.b2);
        for (size_t i = 0; i < hb.v.size(); ++i) {
            hb.v[i] += f2.v[i];
        }
        check_finite(hb, ("layer." + std::to_string(l)).c_str());
    }

    Matrix hf = layer_norm(hb, p.lnf_g, p.lnf_b, nullptr);
    return output_head(p, hf, 0, b);
}

} // namespace simplexlm
