// SPDX-License-Identifier: Apache-2.0
// Straight-line reference implementations used as test oracles. Plain nested
// vectors and loops only; nothing here calls into the library's tape or kernels.
#pragma once

#include <cmath>
#include <vector>

#include "chordprompt/encoder.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const chordprompt::Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t(r, c);
  return m;
}

inline std::vector<double> to_vec(const chordprompt::Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

inline Mat affine(const Mat& x, const chordprompt::Tensor& w, const chordprompt::Tensor* b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Mat y(x.size(), std::vector<double>(out, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double s = b ? (*b)[j] : 0.0;
      for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w(i, j);
      y[r][j] = s;
    }
  return y;
}

inline Mat layer_norm(const Mat& x, const chordprompt::Tensor& g, const chordprompt::Tensor& b) {
  Mat y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mu = 0.0;
    for (double v : x[r]) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : x[r]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t c = 0; c < x[r].size(); ++c)
      y[r][c] = (x[r][c] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

struct BlockOut {
  Mat out;
  // probs[h][i][j]
  std::vector<Mat> probs;
};

/// One pre-LN block over a single sequence `x` with optional prompt P and
/// injection Pi (value pathway only). Prompt rows are dropped from `out`.
inline BlockOut block(const chordprompt::LayerWeights& w, std::size_t heads, const Mat& x,
                      const Mat* p, const Mat* pi) {
  Mat xs = x;
  Mat xv = x;
  if (p) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      xs.push_back((*p)[i]);
      std::vector<double> row = (*p)[i];
      if (pi)
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += (*pi)[i][c];
      xv.push_back(row);
    }
  }
  const std::size_t T = xs.size(), d = xs[0].size(), dh = d / heads;
  const Mat a = layer_norm(xs, w.ln1_gain, w.ln1_bias);
  const Mat q = affine(a, w.wq, &w.bq), k = affine(a, w.wk, &w.bk);
  const Mat v = affine(layer_norm(xv, w.ln1_gain, w.ln1_bias), w.wv, &w.bv);
  Mat o(T, std::vector<double>(d, 0.0));
  BlockOut res;
  for (std::size_t h = 0; h < heads; ++h) {
    Mat pr(T, std::vector<double>(T));
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < T; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i][h * dh + c] * k[j][h * dh + c];
        pr[i][j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, pr[i][j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) z += (pr[i][j] = std::exp(pr[i][j] - mx));
      for (std::size_t j = 0; j < T; ++j) pr[i][j] /= z;
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < T; ++j) s += pr[i][j] * v[j][h * dh + c];
        o[i][h * dh + c] = s;
      }
    }
    res.probs.push_back(pr);
  }
  Mat hmat = affine(o, w.wo, &w.bo);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t c = 0; c < d; ++c) hmat[i][c] += xs[i][c];
  Mat f = affine(layer_norm(hmat, w.ln2_gain, w.ln2_bias), w.fc1, &w.fc1_bias);
  for (auto& row : f)
    for (auto& val : row) val = gelu(val);
  Mat out = affine(f, w.fc2, &w.fc2_bias);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i][c] += hmat[i][c];
  out.resize(x.size());
  res.out = out;
  return res;
}

inline std::vector<double> readout(const std::vector<double>& row, const chordprompt::Tensor& g,
                                   const chordprompt::Tensor& b, const chordprompt::Tensor& proj) {
  return affine(layer_norm(Mat{row}, g, b), proj, nullptr)[0];
}

inline std::vector<double> text_encode(const chordprompt::BackboneWeights& w,
                                       const chordprompt::TokenSeq& tokens,
                                       const std::vector<chordprompt::Tensor>& prompts,
                                       const std::vector<chordprompt::Tensor>& injected) {
  Mat x;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::vector<double> row(w.config.text_width);
    for (std::size_t c = 0; c < row.size(); ++c)
      row[c] = w.token_embedding(tokens[i], c) + w.text_position(i, c);
    x.push_back(row);
  }
  for (std::size_t l = 0; l < w.text_layers.size(); ++l) {
    Mat p, pi;
    if (l < prompts.size()) p = to_mat(prompts[l]);
    if (l < injected.size()) pi = to_mat(injected[l]);
    x = block(w.text_layers[l], w.config.heads, x, l < prompts.size() ? &p : nullptr,
              l < injected.size() ? &pi : nullptr)
            .out;
  }
  return readout(x.back(), w.text_final_gain, w.text_final_bias, w.text_proj);
}

inline Mat embed_patches(const chordprompt::BackboneWeights& w, const chordprompt::Tensor& img) {
  const auto& c = w.config;
  const std::size_t g = c.image_size / c.patch_size, ps = c.patch_size, ch = c.channels;
  Mat x;
  {
    std::vector<double> cls(c.vision_width);
    for (std::size_t k = 0; k < cls.size(); ++k) cls[k] = w.class_embedding[k] + w.vision_position(0, k);
    x.push_back(cls);
  }
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      std::vector<double> flat;
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dx = 0; dx < ps; ++dx)
          for (std::size_t cc = 0; cc < ch; ++cc)
            flat.push_back(img[((pr * ps + dy) * c.image_size + pc * ps + dx) * ch + cc]);
      std::vector<double> row = affine(Mat{flat}, w.patch_weight, &w.patch_bias)[0];
      const std::size_t pos = 1 + pr * g + pc;
      for (std::size_t k = 0; k < row.size(); ++k) row[k] += w.vision_position(pos, k);
      x.push_back(row);
    }
  return x;
}

inline std::vector<double> image_encode(const chordprompt::BackboneWeights& w,
                                        const chordprompt::Tensor& img,
                                        const std::vector<chordprompt::Tensor>& prompts,
                                        const std::vector<chordprompt::Tensor>& injected) {
  Mat x = oracle::embed_patches(w, img);
  for (std::size_t l = 0; l < w.vision_layers.size(); ++l) {
    Mat p, pi;
    if (l < prompts.size()) p = to_mat(prompts[l]);
    if (l < injected.size()) pi = to_mat(injected[l]);
    x = block(w.vision_layers[l], w.config.heads, x, l < prompts.size() ? &p : nullptr,
              l < injected.size() ? &pi : nullptr)
            .out;
  }
  return readout(x.front(), w.vision_final_gain, w.vision_final_bias, w.vision_proj);
}

inline double max_diff(const std::vector<double>& a, const chordprompt::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : 1e300;
}

}  // namespace oracle
