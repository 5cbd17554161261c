"""Equivariant denoiser over a pocket-ligand complex.

Two graphs are built from the current coordinates at every layer: a k-nearest
neighbour graph over pocket and ligand atoms, and the complete graph over ligand
atoms, which carries bond states. Node, edge and coordinate updates follow the
usual EGNN pattern; only atoms flagged as generated ever move.

Everything runs on dense, padded batches in float64:

* pocket ``(B, P, *)`` and ligand ``(B, L, *)`` blocks are concatenated into
  ``N = P + L`` nodes, pocket first;
* ``node_mask`` marks real slots, ``gen_mask`` marks ligand slots being generated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .chemdata import ATOM_VOCAB, BOND_VOCAB, PocketContext

DTYPE = torch.float64
LABEL_PP, LABEL_LL, LABEL_PL = 0, 1, 2
SAFE_EPS = 1e-10  # added under square roots so coincident atoms stay differentiable


class NumericError(FloatingPointError):
    def __init__(self, layer: int, what: str):
        self.layer = layer
        super().__init__(f"non-finite {what} in layer {layer}")


class UsageError(RuntimeError):
    pass


# --------------------------------------------------------------------------- batches


@dataclass
class ComplexBatch:
    pocket_x: Tensor  # (B, P, 3)
    pocket_v: Tensor  # (B, P, Kv)
    pocket_mask: Tensor  # (B, P) bool
    lig_x: Tensor  # (B, L, 3)
    lig_v: Tensor  # (B, L, Kv)
    lig_b: Tensor  # (B, L, L, Kb)
    lig_mask: Tensor  # (B, L) bool
    gen_mask: Tensor  # (B, L) bool
    t: Tensor  # (B,) long

    @property
    def size(self) -> int:
        return self.lig_x.shape[0]

    @property
    def pair_mask(self) -> Tensor:
        """Ordered ligand pairs between distinct real slots."""
        m = self.lig_mask[:, :, None] & self.lig_mask[:, None, :]
        eye = torch.eye(m.shape[-1], dtype=torch.bool)
        return m & ~eye

    @property
    def diffused_pairs(self) -> Tensor:
        g = self.gen_mask
        return self.pair_mask & (g[:, :, None] | g[:, None, :])

    def replace(self, **kw) -> "ComplexBatch":
        d = dict(self.__dict__)
        d.update(kw)
        return ComplexBatch(**d)


def collate(items: list[dict], k_v: int = ATOM_VOCAB.k, k_b: int = BOND_VOCAB.k) -> ComplexBatch:
    """Pad per-complex numpy arrays into a batch.

    Each item has ``pocket_x, pocket_v, lig_x, lig_v, lig_b, gen_mask, t``.
    Padded bond entries are NONE and padded atom rows are zero.
    """
    B = len(items)
    P = max(it["pocket_x"].shape[0] for it in items)
    L = max(it["lig_x"].shape[0] for it in items)
    px = torch.zeros(B, P, 3, dtype=DTYPE)
    pv = torch.zeros(B, P, k_v, dtype=DTYPE)
    pm = torch.zeros(B, P, dtype=torch.bool)
    lx = torch.zeros(B, L, 3, dtype=DTYPE)
    lv = torch.zeros(B, L, k_v, dtype=DTYPE)
    lb = torch.zeros(B, L, L, k_b, dtype=DTYPE)
    lb[..., 0] = 1.0
    lm = torch.zeros(B, L, dtype=torch.bool)
    gm = torch.zeros(B, L, dtype=torch.bool)
    tt = torch.zeros(B, dtype=torch.long)
    for i, it in enumerate(items):
        n_p, n_l = it["pocket_x"].shape[0], it["lig_x"].shape[0]
        px[i, :n_p] = torch.as_tensor(it["pocket_x"], dtype=DTYPE)
        pv[i, :n_p] = torch.as_tensor(it["pocket_v"], dtype=DTYPE)
        pm[i, :n_p] = True
        lx[i, :n_l] = torch.as_tensor(it["lig_x"], dtype=DTYPE)
        lv[i, :n_l] = torch.as_tensor(it["lig_v"], dtype=DTYPE)
        lb[i, :n_l, :n_l] = torch.as_tensor(it["lig_b"], dtype=DTYPE)
        lm[i, :n_l] = True
        gm[i, :n_l] = torch.as_tensor(np.asarray(it["gen_mask"], dtype=bool))
        tt[i] = int(it["t"])
    return ComplexBatch(px, pv, pm, lx, lv, lb, lm, gm, tt)


# --------------------------------------------------------------------------- graphs


def knn_indices(x: Tensor, node_mask: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Indices of the k nearest real neighbours of each node and their validity.

    Ties go to the lower node index (stable sort over index order).
    """
    n = x.shape[1]
    k_eff = max(1, min(k, n - 1))
    with torch.no_grad():
        d2 = ((x[:, :, None, :] - x[:, None, :, :]) ** 2).sum(-1)
        invalid = ~(node_mask[:, :, None] & node_mask[:, None, :])
        invalid |= torch.eye(n, dtype=torch.bool)
        d2 = d2.masked_fill(invalid, float("inf"))
        order = torch.sort(d2, dim=-1, stable=True).indices[..., :k_eff]
        valid = torch.isfinite(torch.gather(d2, -1, order)) & node_mask[:, :, None]
    return order, valid


@dataclass
class ComplexGraph:
    knn_edges: list[tuple[int, int]]  # (i, j): j is a neighbour of i
    knn_labels: list[int]
    ligand_edges: list[tuple[int, int]]
    n_pocket: int = 0

    LABEL_NAMES = ("protein-protein", "ligand-ligand", "protein-ligand")


def build_complex_graph(pocket: PocketContext | None, ligand_x, k: int = 16) -> ComplexGraph:
    """Explicit edge lists for one complex; node ids are pocket atoms then ligand atoms."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lig = np.asarray(ligand_x, dtype=np.float64).reshape(-1, 3)
    pock = np.zeros((0, 3)) if pocket is None else pocket.x
    allx = np.vstack([pock, lig])
    n, n_p = allx.shape[0], pock.shape[0]
    if n < 2:
        raise ValueError("need at least two atoms to build a graph")
    idx, valid = knn_indices(torch.as_tensor(allx)[None], torch.ones(1, n, dtype=torch.bool), k)
    edges, labels = [], []
    for i in range(n):
        for j, ok in zip(idx[0, i].tolist(), valid[0, i].tolist()):
            if not ok:
                continue
            edges.append((i, j))
            li, lj = i >= n_p, j >= n_p
            labels.append(LABEL_LL if li and lj else LABEL_PP if not (li or lj) else LABEL_PL)
    n_l = lig.shape[0]
    lig_edges = [(n_p + a, n_p + c) for a in range(n_l) for c in range(n_l) if a != c]
    return ComplexGraph(edges, labels, lig_edges, n_p)


# --------------------------------------------------------------------------- model


def time_features(t_norm: Tensor, dim: int) -> Tensor:
    """Sinusoidal features of the normalized step t/T, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(100.0), half, dtype=DTYPE)) * math.pi
    ang = t_norm[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def rbf(d: Tensor, n: int, cutoff: float = 10.0) -> Tensor:
    centers = torch.linspace(0.0, cutoff, n, dtype=DTYPE)
    gamma = 1.0 / (2.0 * (cutoff / (n - 1)) ** 2)
    return torch.exp(-gamma * (d[..., None] - centers) ** 2)


def safe_norm(v: Tensor) -> Tensor:
    return torch.sqrt((v ** 2).sum(-1) + SAFE_EPS)


def mlp(d_in: int, d_hidden: int, d_out: int, zero_last: bool = False) -> nn.Sequential:
    net = nn.Sequential(nn.Linear(d_in, d_hidden, dtype=DTYPE), nn.SiLU(), nn.Linear(d_hidden, d_out, dtype=DTYPE))
    if zero_last:
        nn.init.zeros_(net[2].weight)
        nn.init.zeros_(net[2].bias)
    return net


def _lin(d_in: int, d_out: int, bias: bool = False) -> nn.Linear:
    return nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE)


def _gather_nodes(a: Tensor, nbr: Tensor) -> Tensor:
    """a: (B, N, D), nbr: (B, N, k) -> (B, N, k, D)."""
    B, N, k = nbr.shape
    flat = nbr.reshape(B, N * k, 1).expand(B, N * k, a.shape[-1])
    return torch.gather(a, 1, flat).reshape(B, N, k, a.shape[-1])


class EdgeNet(nn.Module):
    """Two-layer network on edge features whose first affine map is split per input.

    ``parts`` maps argument names to input widths. Node-level arguments can then be
    projected once per node and broadcast onto edges.
    """

    def __init__(self, parts: dict[str, int], hidden: int, d_out: int, zero_last: bool = False):
        super().__init__()
        names = list(parts)
        self.first = nn.ModuleDict({n: _lin(parts[n], hidden, bias=(i == 0)) for i, n in enumerate(names)})
        self.out = _lin(hidden, d_out, bias=True)
        if zero_last:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def proj(self, name: str, a: Tensor) -> Tensor:
        return self.first[name](a)


class EGNNLayer(nn.Module):
    def __init__(self, hidden: int, edge_hidden: int, time_dim: int, n_rbf: int, label_dim: int,
                 norm: float):
        super().__init__()
        H, He = hidden, edge_hidden
        self.norm = norm
        self.label_embed = nn.Embedding(3, label_dim, dtype=DTYPE)
        knn_parts = dict(hi=H, hj=H, dist=n_rbf, label=label_dim, t=time_dim)
        self.phi_mK = EdgeNet(knn_parts, H, H)
        self.phi_d = mlp(n_rbf + He, He, He)
        self.phi_mL = EdgeNet(dict(hi=H, hj=H, m=He, t=time_dim), H, H)
        self.phi_h = mlp(H, H, H)
        self.phi_e = EdgeNet(dict(hi=H, hj=H, hk=H, mkj=He, mji=He, t=time_dim), He, He)
        self.phi_xK = EdgeNet(knn_parts, H, 1, zero_last=True)
        self.phi_xL = EdgeNet(dict(hi=H, hj=H, dist=n_rbf, m=He, t=time_dim), H, 1, zero_last=True)

    def _knn_pre(self, net: EdgeNet, h, nbr, dist_f, lab_e, tf):
        node = net.proj("hi", h) + net.proj("t", tf)[:, None]
        w_edge = torch.cat([net.first["dist"].weight, net.first["label"].weight], 1)
        edge = torch.cat([dist_f, lab_e], -1) @ w_edge.T
        return (node[:, :, None] + _gather_nodes(net.proj("hj", h), nbr)) + edge

    def forward(self, h, e, x, ctx, index: int):
        B, N, H = h.shape
        P = ctx["P"]
        L = N - P
        tf = ctx["tf"]
        n_rbf = ctx["n_rbf"]
        silu = torch.nn.functional.silu

        # knn graph over the whole complex
        nbr, valid = knn_indices(x, ctx["node_mask"], ctx["k"])
        vm = valid[..., None].to(DTYPE)
        cnt_k = vm.sum(2)
        rel_k = _gather_nodes(x, nbr) - x[:, :, None, :]
        d_k = safe_norm(rel_k)
        rbf_k = rbf(d_k, n_rbf)
        is_lig = ctx["is_lig"].to(torch.long)
        lig_j = _gather_nodes(is_lig[..., None], nbr)[..., 0]
        lab = torch.where(is_lig[:, :, None] + lig_j == 2, LABEL_LL,
                          torch.where(is_lig[:, :, None] + lig_j == 0, LABEL_PP, LABEL_PL))
        lab_e = self.label_embed(lab)
        act = silu(self._knn_pre(self.phi_mK, h, nbr, rbf_k, lab_e, tf)) * vm
        dh_k = (act.sum(2) @ self.phi_mK.out.weight.T + cnt_k * self.phi_mK.out.bias) / self.norm

        # complete ligand graph
        xl = x[:, P:]
        hl = h[:, P:]
        rel_l = xl[:, None, :, :] - xl[:, :, None, :]  # [b, i, j] = x_j - x_i
        d_l = safe_norm(rel_l)
        rbf_l = rbf(d_l, n_rbf)
        pm = ctx["pair_mask"][..., None].to(DTYPE)
        cnt_l = pm.sum(2)
        m = self.phi_d(torch.cat([rbf_l, e], -1)) * pm  # m[b, i, j] = m_ij
        m_ji = m.transpose(1, 2)  # [b, i, j] = m_ji
        net = self.phi_mL
        pre = (net.proj("hi", hl)[:, :, None] + net.proj("hj", hl)[:, None, :] + net.proj("m", m_ji)
               + net.proj("t", tf)[:, None, None])
        dh_l = ((silu(pre) * pm).sum(2) @ net.out.weight.T + cnt_l * net.out.bias) / self.norm
        dh = dh_k + torch.cat([torch.zeros(B, P, H, dtype=DTYPE), dh_l], 1)
        h = h + self.phi_h(dh)

        # directional edge update: e_ji <- e_ji + sum_{k in N(j) \ i} phi_e(h_i, h_j, h_k, m_kj, m_ji, t)
        hl = h[:, P:]
        net = self.phi_e
        # pre[b, j, i, k] = u[b, j, i] + w[b, j, k]
        u = (net.proj("hi", hl)[:, None, :, :] + net.proj("hj", hl)[:, :, None, :]
             + net.proj("mji", m) + net.proj("t", tf)[:, None, None, :])
        w = net.proj("hk", hl)[:, None, :, :] + net.proj("mkj", m).transpose(1, 2)
        act = silu(u[:, :, :, None, :] + w[:, :, None, :, :])
        pmask = ctx["pair_mask"].to(DTYPE)
        # sum over real k != j, then drop the k == i term
        agg = torch.einsum("bjikh,bjk->bjih", act, pmask) - silu(u + w) * pm
        cnt = (cnt_l - 1.0).clamp_min(0.0)[:, :, None, :]
        e = e + (agg @ net.out.weight.T + cnt * net.out.bias) / self.norm * pm

        # coordinates: only generated ligand atoms move
        w_k = silu(self._knn_pre(self.phi_xK, h, nbr, rbf_k, lab_e, tf)) @ self.phi_xK.out.weight.T
        w_k = (w_k + self.phi_xK.out.bias) * vm
        dx_k = (rel_k / (d_k[..., None] + 1.0) * w_k).sum(2) / self.norm
        hl = h[:, P:]
        net = self.phi_xL
        pre = (net.proj("hi", hl)[:, :, None] + net.proj("hj", hl)[:, None, :] + net.proj("dist", rbf_l)
               + net.proj("m", m_ji) + net.proj("t", tf)[:, None, None])
        w_l = (silu(pre) @ net.out.weight.T + net.out.bias) * pm
        dx_l = (rel_l / (d_l[..., None] + 1.0) * w_l).sum(2) / self.norm
        dx = dx_k[:, P:] + dx_l
        xl_new = torch.where(ctx["gen_mask"][..., None], xl + dx, xl)
        x = torch.cat([x[:, :P], xl_new], 1)

        for name, val in (("node state", h), ("edge state", e), ("coordinates", x)):
            if not torch.isfinite(val).all():
                raise NumericError(index, name)
        return h, e, x


class EGNNDenoiser(nn.Module):
    """Predicts the clean mask coordinates, atom types and bond types."""

    def __init__(self, k_v: int = ATOM_VOCAB.k, k_b: int = BOND_VOCAB.k, hidden: int = 64,
                 edge_hidden: int = 32, n_layers: int = 4, k: int = 16, time_dim: int = 16,
                 n_rbf: int = 16, label_dim: int = 8, norm: float = 10.0, seed: int = 0):
        super().__init__()
        self.config = dict(k_v=k_v, k_b=k_b, hidden=hidden, edge_hidden=edge_hidden, n_layers=n_layers,
                           k=k, time_dim=time_dim, n_rbf=n_rbf, label_dim=label_dim, norm=norm, seed=seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.atom_embed = nn.Linear(k_v + 2 + time_dim, hidden, dtype=DTYPE)
            self.bond_embed = nn.Linear(k_b + 1 + time_dim, edge_hidden, dtype=DTYPE)
            self.layers = nn.ModuleList(
                EGNNLayer(hidden, edge_hidden, time_dim, n_rbf, label_dim, norm) for _ in range(n_layers))
            self.atom_head = mlp(hidden, hidden, k_v)
            self.bond_head = mlp(edge_hidden, edge_hidden, k_b)

    @property
    def k_v(self) -> int:
        return self.config["k_v"]

    @property
    def k_b(self) -> int:
        return self.config["k_b"]

    def forward(self, batch: ComplexBatch, T: int) -> dict[str, Tensor]:
        cfg = self.config
        B, P = batch.pocket_x.shape[:2]
        L = batch.lig_x.shape[1]
        tf = time_features(batch.t.to(DTYPE) / T, cfg["time_dim"])
        pair_mask = batch.pair_mask
        real = batch.lig_mask
        ctx = dict(P=P, tf=tf, n_rbf=cfg["n_rbf"], k=cfg["k"],
                   node_mask=torch.cat([batch.pocket_mask, real], 1),
                   is_lig=torch.cat([torch.zeros(B, P, dtype=torch.bool), torch.ones(B, L, dtype=torch.bool)], 1),
                   pair_mask=pair_mask, gen_mask=batch.gen_mask)

        flags_p = torch.zeros(B, P, 2, dtype=DTYPE)
        flags_l = torch.stack([real.to(DTYPE), batch.gen_mask.to(DTYPE)], -1)
        feats = torch.cat([torch.cat([batch.pocket_v, flags_p], -1), torch.cat([batch.lig_v, flags_l], -1)], 1)
        feats = torch.cat([feats, tf[:, None].expand(B, P + L, tf.shape[-1])], -1)
        node_mask = ctx["node_mask"][..., None].to(DTYPE)
        h = self.atom_embed(feats) * node_mask
        diffused = batch.diffused_pairs[..., None].to(DTYPE)
        e = self.bond_embed(torch.cat([batch.lig_b, diffused, tf[:, None, None].expand(B, L, L, tf.shape[-1])], -1))
        e = e * pair_mask[..., None].to(DTYPE)
        x = torch.cat([batch.pocket_x, batch.lig_x], 1)

        for i, layer in enumerate(self.layers):
            h = h * node_mask
            h, e, x = layer(h, e, x, ctx, i)

        hl = h[:, P:]
        v_hat = torch.softmax(self.atom_head(hl), -1)
        b_hat = torch.softmax(self.bond_head(e + e.transpose(1, 2)), -1)
        return {"x0": x[:, P:], "v0": v_hat, "b0": b_hat, "h": h, "h_lig": hl, "e": e, "tf": tf}


# --------------------------------------------------------------------------- recorded forward / backward


@dataclass
class ForwardRecord:
    outputs: dict
    inputs: dict  # leaf tensors with requires_grad
    params: list
    names: list


def egnn_forward(model: EGNNDenoiser, batch: ComplexBatch, T: int, record: bool = False):
    """Run the denoiser. With ``record`` the graph is kept for :func:`backward`.

    Gradients with respect to inputs only flow into generated atoms and diffused
    bond entries; retained and pocket entries enter as constants.
    """
    if not record:
        with torch.no_grad():
            return model(batch, T)
    x_leaf = batch.lig_x.detach().clone().requires_grad_(True)
    v_leaf = batch.lig_v.detach().clone().requires_grad_(True)
    b_leaf = batch.lig_b.detach().clone().requires_grad_(True)
    gen = batch.gen_mask[..., None]
    dif = batch.diffused_pairs[..., None]
    inner = batch.replace(
        lig_x=torch.where(gen, x_leaf, x_leaf.detach()),
        lig_v=torch.where(gen, v_leaf, v_leaf.detach()),
        lig_b=torch.where(dif, b_leaf, b_leaf.detach()),
    )
    with torch.enable_grad():
        out = model(inner, T)
    names, params = zip(*model.named_parameters())
    return ForwardRecord(out, {"x": x_leaf, "v": v_leaf, "b": b_leaf}, list(params), list(names))


def backward(record: ForwardRecord | None, upstream: dict[str, Tensor] | None = None,
             scalar: Tensor | None = None, retain_graph: bool = False):
    """Reverse-mode gradients of ``sum(upstream[k] * outputs[k]) (+ scalar)``.

    Returns ``(param_grads, input_grads)`` as dicts keyed by parameter name and by
    ``x``/``v``/``b``.
    """
    if not isinstance(record, ForwardRecord):
        raise UsageError("backward needs a forward pass run with record=True")
    total = torch.zeros((), dtype=DTYPE)
    for key, g in (upstream or {}).items():
        total = total + (record.outputs[key] * g).sum()
    if scalar is not None:
        total = total + scalar
    leaves = record.params + [record.inputs["x"], record.inputs["v"], record.inputs["b"]]
    grads = torch.autograd.grad(total, leaves, allow_unused=True, retain_graph=retain_graph)
    grads = [torch.zeros_like(l) if g is None else g for g, l in zip(grads, leaves)]
    n = len(record.params)
    return dict(zip(record.names, grads[:n])), {"x": grads[n], "v": grads[n + 1], "b": grads[n + 2]}
