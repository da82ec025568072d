//! Reverse-mode gradients for the transformer. The training forward pass
//! records a tape of activations; `backward` walks it in reverse and
//! produces weight gradients shaped exactly like [`Params`].

use crate::error::Result;
use crate::masking::AdditiveMask;
use crate::model::{add_assign, gelu, gelu_deriv, inv_rms, Model, Params, Token};
use crate::numerics::{
    dot, masked_softmax_row, matmul_a_bt_into, matmul_at_b_acc, matmul_into, Matrix,
};

pub(crate) struct LayerTape {
    h_in: Matrix, // residual stream entering the layer
    inv_rms1: Vec<f32>,
    normed1: Matrix,
    q: Matrix, // post-rope
    k: Matrix, // post-rope
    v: Matrix,
    probs: Vec<Matrix>, // per query head
    attn_concat: Matrix,
    h_mid: Matrix, // after attention residual
    inv_rms2: Vec<f32>,
    normed2: Matrix,
    u: Matrix, // ffn pre-activation
    gelu_u: Matrix,
}

pub(crate) struct Tape {
    tokens: Vec<Token>,
    layers: Vec<LayerTape>,
    h_final: Matrix,
    inv_rms_f: Vec<f32>,
    normed_f: Matrix,
    pub(crate) logits: Matrix,
}

/// Forward pass that keeps every activation needed by `backward`.
pub(crate) fn forward_train(model: &Model, tokens: &[Token], mask: &AdditiveMask) -> Result<Tape> {
    let cfg = *model.config();
    let t = tokens.len();
    let params = model.params();
    let hd = cfg.head_dim;
    let scale = 1.0 / (hd as f32).sqrt();

    let mut h = Matrix::zeros(t, cfg.d_model);
    for (i, &tok) in tokens.iter().enumerate() {
        h.row_mut(i).copy_from_slice(params.embed.row(tok as usize));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut scores = vec![0.0f32; t];
    for layer in &params.layers {
        let h_in = h.clone();
        let mut inv_rms1 = vec![0.0f32; t];
        let mut normed1 = Matrix::zeros(t, cfg.d_model);
        for i in 0..t {
            let r = inv_rms(h.row(i));
            inv_rms1[i] = r;
            let gain = layer.attn_norm.row(0);
            for ((o, &x), &g) in normed1.row_mut(i).iter_mut().zip(h.row(i)).zip(gain) {
                *o = x * r * g;
            }
        }
        let mut q = Matrix::zeros(t, cfg.q_dim());
        let mut k = Matrix::zeros(t, cfg.kv_dim());
        let mut v = Matrix::zeros(t, cfg.kv_dim());
        matmul_into(&normed1, &layer.wq, &mut q);
        matmul_into(&normed1, &layer.wk, &mut k);
        matmul_into(&normed1, &layer.wv, &mut v);
        for i in 0..t {
            model.rope_rotate(q.row_mut(i), cfg.n_q_heads, i);
            model.rope_rotate(k.row_mut(i), cfg.n_kv_heads, i);
        }

        let mut probs = vec![Matrix::zeros(t, t); cfg.n_q_heads];
        let mut attn_concat = Matrix::zeros(t, cfg.q_dim());
        for qh in 0..cfg.n_q_heads {
            let kvh = qh / cfg.group_size();
            let p_mat = &mut probs[qh];
            for i in 0..t {
                let q_slice = &q.row(i)[qh * hd..(qh + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(q_slice, &k.row(j)[kvh * hd..(kvh + 1) * hd]) * scale;
                }
                masked_softmax_row(&scores, mask.entries.row(i), p_mat.row_mut(i))?;
            }
            for i in 0..t {
                let out = &mut attn_concat.row_mut(i)[qh * hd..(qh + 1) * hd];
                for j in 0..t {
                    let p = p_mat.get(i, j);
                    if p != 0.0 {
                        let v_slice = &v.row(j)[kvh * hd..(kvh + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(v_slice) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let mut proj = Matrix::zeros(t, cfg.d_model);
        matmul_into(&attn_concat, &layer.wo, &mut proj);
        add_assign(&mut h, &proj);
        let h_mid = h.clone();

        let mut inv_rms2 = vec![0.0f32; t];
        let mut normed2 = Matrix::zeros(t, cfg.d_model);
        for i in 0..t {
            let r = inv_rms(h.row(i));
            inv_rms2[i] = r;
            let gain = layer.ffn_norm.row(0);
            for ((o, &x), &g) in normed2.row_mut(i).iter_mut().zip(h.row(i)).zip(gain) {
                *o = x * r * g;
            }
        }
        let mut u = Matrix::zeros(t, cfg.d_ff);
        matmul_into(&normed2, &layer.w1, &mut u);
        let mut gelu_u = u.clone();
        for x in gelu_u.data_mut() {
            *x = gelu(*x);
        }
        let mut ffn_out = Matrix::zeros(t, cfg.d_model);
        matmul_into(&gelu_u, &layer.w2, &mut ffn_out);
        add_assign(&mut h, &ffn_out);

        layers.push(LayerTape {
            h_in,
            inv_rms1,
            normed1,
            q,
            k,
            v,
            probs,
            attn_concat,
            h_mid,
            inv_rms2,
            normed2,
            u,
            gelu_u,
        });
    }

    let h_final = h.clone();
    let mut inv_rms_f = vec![0.0f32; t];
    let mut normed_f = Matrix::zeros(t, cfg.d_model);
    for i in 0..t {
        let r = inv_rms(h.row(i));
        inv_rms_f[i] = r;
        let gain = params.final_norm.row(0);
        for ((o, &x), &g) in normed_f.row_mut(i).iter_mut().zip(h.row(i)).zip(gain) {
            *o = x * r * g;
        }
    }
    let mut logits = Matrix::zeros(t, cfg.vocab_size);
    matmul_into(&normed_f, &params.head, &mut logits);

    Ok(Tape {
        tokens: tokens.to_vec(),
        layers,
        h_final,
        inv_rms_f,
        normed_f,
        logits,
    })
}

/// dL/dx and dL/dgain for y = x * inv_rms(x) * gain, one row.
fn rmsnorm_backward_row(
    x: &[f32],
    r: f32,
    gain: &[f32],
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
) {
    let d = x.len() as f32;
    let mut inner = 0.0f32;
    for ((&dyv, &g), &xv) in dy.iter().zip(gain).zip(x) {
        inner += dyv * g * xv;
    }
    let coef = r * r * r * inner / d;
    for (((dxv, &dyv), &g), &xv) in dx.iter_mut().zip(dy).zip(gain).zip(x) {
        *dxv = r * g * dyv - coef * xv;
    }
    for ((dg, &dyv), &xv) in dgain.iter_mut().zip(dy).zip(x) {
        *dg += dyv * xv * r;
    }
}

/// Walks the tape in reverse; `dlogits` carries the loss gradient for
/// every position (zero rows for positions outside the loss region).
pub(crate) fn backward(model: &Model, tape: &Tape, dlogits: &Matrix) -> Params {
    let cfg = *model.config();
    let t = tape.tokens.len();
    let params = model.params();
    let hd = cfg.head_dim;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut grads = Params::zeros(&cfg);

    // Output head.
    matmul_at_b_acc(&tape.normed_f, dlogits, &mut grads.head);
    let mut dnormed = Matrix::zeros(t, cfg.d_model);
    matmul_a_bt_into(dlogits, &params.head, &mut dnormed);

    // Final norm.
    let mut dh = Matrix::zeros(t, cfg.d_model);
    let mut dx = vec![0.0f32; cfg.d_model];
    for i in 0..t {
        rmsnorm_backward_row(
            tape.h_final.row(i),
            tape.inv_rms_f[i],
            params.final_norm.row(0),
            dnormed.row(i),
            &mut dx,
            grads.final_norm.row_mut(0),
        );
        dh.row_mut(i).copy_from_slice(&dx);
    }

    let mut dq = Matrix::zeros(t, cfg.q_dim());
    let mut dk = Matrix::zeros(t, cfg.kv_dim());
    let mut dv = Matrix::zeros(t, cfg.kv_dim());
    let mut dp_row = vec![0.0f32; t];

    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lt = &tape.layers[l];
        let lg = &mut grads.layers[l];

        // FFN block: h = h_mid + gelu(normed2 @ w1) @ w2.
        let dffn_out = &dh;
        matmul_at_b_acc(&lt.gelu_u, dffn_out, &mut lg.w2);
        let mut du = Matrix::zeros(t, cfg.d_ff);
        matmul_a_bt_into(dffn_out, &layer.w2, &mut du);
        for (duv, &uv) in du.data_mut().iter_mut().zip(lt.u.data()) {
            *duv *= gelu_deriv(uv);
        }
        matmul_at_b_acc(&lt.normed2, &du, &mut lg.w1);
        let mut dnormed2 = Matrix::zeros(t, cfg.d_model);
        matmul_a_bt_into(&du, &layer.w1, &mut dnormed2);
        let mut dh_mid = dh.clone(); // residual branch
        for i in 0..t {
            rmsnorm_backward_row(
                lt.h_mid.row(i),
                lt.inv_rms2[i],
                layer.ffn_norm.row(0),
                dnormed2.row(i),
                &mut dx,
                lg.ffn_norm.row_mut(0),
            );
            for (a, &b) in dh_mid.row_mut(i).iter_mut().zip(&dx) {
                *a += b;
            }
        }

        // Attention block: h_mid = h_in + (attn_concat @ wo).
        let dproj = &dh_mid;
        matmul_at_b_acc(&lt.attn_concat, dproj, &mut lg.wo);
        let mut dattn = Matrix::zeros(t, cfg.q_dim());
        matmul_a_bt_into(dproj, &layer.wo, &mut dattn);

        dq.fill(0.0);
        dk.fill(0.0);
        dv.fill(0.0);
        for qh in 0..cfg.n_q_heads {
            let kvh = qh / cfg.group_size();
            let p_mat = &lt.probs[qh];
            let kv_off = kvh * hd;
            for i in 0..t {
                let dout = &dattn.row(i)[qh * hd..(qh + 1) * hd];
                let p_row = p_mat.row(i);
                // dP, then the softmax Jacobian, skipping masked keys.
                let mut sum_dp = 0.0f32;
                for (j, dp) in dp_row[..t].iter_mut().enumerate() {
                    let p = p_row[j];
                    if p == 0.0 {
                        *dp = 0.0;
                        continue;
                    }
                    *dp = dot(dout, &lt.v.row(j)[kv_off..kv_off + hd]);
                    sum_dp += *dp * p;
                }
                let q_slice = &lt.q.row(i)[qh * hd..(qh + 1) * hd];
                let dq_slice = &mut dq.row_mut(i)[qh * hd..(qh + 1) * hd];
                for (j, &dpv) in dp_row[..t].iter().enumerate() {
                    let p = p_row[j];
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dpv - sum_dp) * scale;
                    // dV and dK accumulate across the head group.
                    let vg = &mut dv.row_mut(j)[kv_off..kv_off + hd];
                    for (g, &o) in vg.iter_mut().zip(dout.iter()) {
                        *g += p * o;
                    }
                    let kg = &mut dk.row_mut(j)[kv_off..kv_off + hd];
                    for (g, &qv) in kg.iter_mut().zip(q_slice.iter()) {
                        *g += ds * qv;
                    }
                    let k_slice = &lt.k.row(j)[kv_off..kv_off + hd];
                    for (g, &kv) in dq_slice.iter_mut().zip(k_slice.iter()) {
                        *g += ds * kv;
                    }
                }
            }
        }
        // Undo the rotary rotation before hitting the projections.
        for i in 0..t {
            model.rope_rotate_inv(dq.row_mut(i), cfg.n_q_heads, i);
            model.rope_rotate_inv(dk.row_mut(i), cfg.n_kv_heads, i);
        }

        matmul_at_b_acc(&lt.normed1, &dq, &mut lg.wq);
        matmul_at_b_acc(&lt.normed1, &dk, &mut lg.wk);
        matmul_at_b_acc(&lt.normed1, &dv, &mut lg.wv);
        let mut dnormed1 = Matrix::zeros(t, cfg.d_model);
        matmul_a_bt_into(&dq, &layer.wq, &mut dnormed1);
        let mut tmp = Matrix::zeros(t, cfg.d_model);
        matmul_a_bt_into(&dk, &layer.wk, &mut tmp);
        add_assign(&mut dnormed1, &tmp);
        matmul_a_bt_into(&dv, &layer.wv, &mut tmp);
        add_assign(&mut dnormed1, &tmp);

        let mut dh_in = dh_mid.clone();
        for i in 0..t {
            rmsnorm_backward_row(
                lt.h_in.row(i),
                lt.inv_rms1[i],
                layer.attn_norm.row(0),
                dnormed1.row(i),
                &mut dx,
                lg.attn_norm.row_mut(0),
            );
            for (a, &b) in dh_in.row_mut(i).iter_mut().zip(&dx) {
                *a += b;
            }
        }
        dh = dh_in;
    }

    // Embedding scatter.
    for (i, &tok) in tape.tokens.iter().enumerate() {
        let row = grads.embed.row_mut(tok as usize);
        for (g, &d) in row.iter_mut().zip(dh.row(i)) {
            *g += d;
        }
    }

    grads
}
