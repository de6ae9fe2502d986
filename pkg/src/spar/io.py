"""Binary checkpoint and dataset files.

Checkpoint layout (little endian)::

    b"SPARCKPT" | u32 version | u32 entry count
    per entry: u32 name length | name (UTF-8) | u32 rank | u32 dims... | f64 payload

Metadata travels as one rank-1 entry named ``meta`` whose values are the
bytes of a UTF-8 JSON document.

Evaluation records::

    b"SPAREVAL" | u32 version | u32 record count
    per record: u32 length | UTF-8 JSON row
    u32 length | UTF-8 JSON summary

Dataset layout (little endian)::

    b"SPARDATA" | u32 version | u32 d_s | u32 d_a | u32 n
    n records of f32 (s, a, r, s', done) | f32 state_mean | f32 state_std
    u32 length | UTF-8 JSON meta
"""

from __future__ import annotations

import functools
import json
import os
import struct

import numpy as np

from .anchor import AnchorBundle, BasePolicy, CriticEnsemble
from .envs import OfflineDataset
from .nn import GraphEnsemble, ParamGraph

CKPT_MAGIC = b"SPARCKPT"
DATA_MAGIC = b"SPARDATA"
EVAL_MAGIC = b"SPAREVAL"
VERSION = 1


class FormatError(ValueError):
    """File does not follow the expected binary layout."""


def _strict(decode):
    """Report truncated or garbled payloads as FormatError."""
    @functools.wraps(decode)
    def wrapped(blob):
        try:
            return decode(blob)
        except FormatError:
            raise
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt payload: {exc}") from exc
    return wrapped


def _atomic_write(path, blob: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------- checkpoint

def encode_checkpoint(entries: dict, meta: dict = None) -> bytes:
    items = dict(entries)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        items["meta"] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    out = [CKPT_MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(out)


@_strict
def decode_checkpoint(blob: bytes):
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 16
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos += 8 * size
        entries[name] = arr.reshape(shape)
    if pos != len(blob):
        raise FormatError("trailing bytes after the last entry")
    meta = None
    if "meta" in entries:
        raw = entries.pop("meta").astype(np.uint8).tobytes()
        meta = json.loads(raw.decode("utf-8"))
    return entries, meta


def save_checkpoint(path, entries: dict, meta: dict = None):
    _atomic_write(path, encode_checkpoint(entries, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def _arch(g):
    return {"sizes": list(g.layer_sizes), "acts": list(g.activations)}


def bundle_entries(bundle: AnchorBundle):
    c = bundle.critics
    entries = {"base_policy": bundle.base_policy.net.params,
               "value_net": bundle.value_net.params,
               "state_mean": bundle.state_mean, "state_std": bundle.state_std}
    for i in range(len(c)):
        entries[f"critic_{i}"] = c.members.params[i]
        entries[f"target_{i}"] = c.targets.params[i]
    meta = {"kind": "stage1", "lambda_u": bundle.lambda_u,
            "expectile_tau": c.expectile_tau, "gamma": c.gamma,
            "subsets": {k: list(v) for k, v in c.subsets.items()},
            "policy_type": bundle.base_policy.kind,
            "arch": {"base": _arch(bundle.base_policy.net),
                     "critic": _arch(c.members), "value": _arch(bundle.value_net)},
            "extra": bundle.meta}
    return entries, meta


def bundle_from_entries(entries, meta) -> AnchorBundle:
    if meta is None or meta.get("kind") != "stage1":
        raise FormatError("checkpoint does not hold a Stage I bundle")
    arch = meta["arch"]
    mk = lambda a, p: ParamGraph(a["sizes"], a["acts"], p.copy())
    base = BasePolicy(mk(arch["base"], entries["base_policy"]), meta["policy_type"],
                      entries["state_mean"], entries["state_std"])
    m = sum(1 for k in entries if k.startswith("critic_"))
    ca = arch["critic"]
    members = GraphEnsemble(ca["sizes"], ca["acts"],
                            np.stack([entries[f"critic_{i}"] for i in range(m)]))
    targets = GraphEnsemble(ca["sizes"], ca["acts"],
                            np.stack([entries[f"target_{i}"] for i in range(m)]))
    critics = CriticEnsemble(members, meta["subsets"], meta["gamma"],
                             meta["expectile_tau"], targets)
    bundle = AnchorBundle(base, critics, mk(arch["value"], entries["value_net"]),
                          meta["lambda_u"], entries["state_mean"].copy(),
                          entries["state_std"].copy(), meta.get("extra"))
    return bundle.freeze()


def save_bundle(path, bundle):
    save_checkpoint(path, *bundle_entries(bundle))


def load_bundle(path) -> AnchorBundle:
    return bundle_from_entries(*load_checkpoint(path))


def policy_entries(policy, cfg_meta: dict = None):
    from .residual import PlasActor, ProjState, ResidualMlp
    meta = {"kind": "stage2", **(cfg_meta or {})}
    if isinstance(policy, ResidualMlp):
        meta.update(variant="mlp", lambda_g=policy.lambda_g, arch=_arch(policy.net))
        return {"residual/net": policy.net.params}, meta
    if isinstance(policy, ProjState):
        on, tg = policy.online, policy.target
        meta.update(variant=meta.get("variant", "proj"), lambda_g=policy.lambda_g,
                    K=policy.K, projection_period=policy.projection_period,
                    ema_tau=policy.ema_tau, latent_dim=on.latent_dim,
                    kl_weight=on.kl_weight, recon_weight=on.recon_weight,
                    weighting=vars(policy.weighting).copy(),
                    arch={"encoder": _arch(on.encoder), "decoder": _arch(on.decoder)})
        return {"online/encoder": on.encoder.params, "online/decoder": on.decoder.params,
                "target/encoder": tg.encoder.params,
                "target/decoder": tg.decoder.params}, meta
    if isinstance(policy, PlasActor):
        meta.update(variant="plas", lambda_g=policy.lambda_g,
                    arch={"latent": _arch(policy.latent), "decoder": _arch(policy.decoder)})
        return {"latent": policy.latent.params, "decoder": policy.decoder.params}, meta
    raise TypeError(f"cannot serialize {type(policy).__name__}")


def policy_from_entries(entries, meta):
    from .residual import PlasActor, ProjState, ResidualCvae, ResidualMlp
    from .weighting import WeightingConfig
    if meta is None or meta.get("kind") != "stage2":
        raise FormatError("checkpoint does not hold a residual policy")
    arch = meta["arch"]
    mk = lambda a, p: ParamGraph(a["sizes"], a["acts"], p.copy())
    v = meta["variant"]
    if v == "mlp":
        return ResidualMlp(mk(arch, entries["residual/net"]), meta["lambda_g"])
    if v in ("proj", "cvae"):
        cv = lambda pre: ResidualCvae(mk(arch["encoder"], entries[f"{pre}/encoder"]),
                                      mk(arch["decoder"], entries[f"{pre}/decoder"]),
                                      meta["latent_dim"], meta["kl_weight"],
                                      meta["recon_weight"])
        return ProjState(cv("online"), cv("target"), meta["K"],
                         meta["projection_period"], meta["ema_tau"],
                         WeightingConfig(**meta["weighting"]), meta["lambda_g"])
    if v == "plas":
        return PlasActor(mk(arch["latent"], entries["latent"]),
                         mk(arch["decoder"], entries["decoder"]), meta["lambda_g"])
    raise FormatError(f"unknown residual variant {v!r}")


def save_policy(path, policy, cfg_meta=None):
    save_checkpoint(path, *policy_entries(policy, cfg_meta))


def load_policy(path):
    return policy_from_entries(*load_checkpoint(path))


# ---------------------------------------------------------------- dataset

def encode_dataset(ds: OfflineDataset) -> bytes:
    n, d_s, d_a = len(ds), ds.d_s, ds.d_a
    rec = np.concatenate([ds.states, ds.actions, ds.rewards[:, None],
                          ds.next_states, ds.dones[:, None].astype(np.float64)],
                         axis=1).astype("<f4")
    meta = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
    return b"".join([DATA_MAGIC, struct.pack("<IIII", VERSION, d_s, d_a, n),
                     rec.tobytes(), np.asarray(ds.state_mean, "<f4").tobytes(),
                     np.asarray(ds.state_std, "<f4").tobytes(),
                     struct.pack("<I", len(meta)), meta])


@_strict
def decode_dataset(blob: bytes) -> OfflineDataset:
    if blob[:8] != DATA_MAGIC:
        raise FormatError("not a dataset file")
    version, d_s, d_a, n = struct.unpack_from("<IIII", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    width = 2 * d_s + d_a + 2
    pos = 24
    rec = np.frombuffer(blob, "<f4", n * width, pos).reshape(n, width).astype(np.float64)
    pos += 4 * n * width
    pos += 8 * d_s  # stored stats are informative only; recomputed below in f64
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    if pos + mlen != len(blob):
        raise FormatError("dataset length does not match its header")
    s = rec[:, :d_s]
    a = rec[:, d_s:d_s + d_a]
    r = rec[:, d_s + d_a]
    s2 = rec[:, d_s + d_a + 1:2 * d_s + d_a + 1]
    done = rec[:, -1] > 0.5
    return OfflineDataset(s.copy(), a.copy(), r.copy(), s2.copy(), done, meta)


def save_dataset(path, ds):
    _atomic_write(path, encode_dataset(ds))


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# ---------------------------------------------------------------- evaluation

def _json_chunk(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_eval_records(records, summary: dict) -> bytes:
    records = list(records or [])
    out = [EVAL_MAGIC, struct.pack("<II", VERSION, len(records))]
    out.extend(_json_chunk(r) for r in records)
    out.append(_json_chunk(summary))
    return b"".join(out)


@_strict
def decode_eval_records(blob: bytes):
    if blob[:8] != EVAL_MAGIC:
        raise FormatError("not an evaluation file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported evaluation version {version}")
    pos, rows = 16, []
    for _ in range(count + 1):
        (n,) = struct.unpack_from("<I", blob, pos)
        rows.append(json.loads(blob[pos + 4:pos + 4 + n].decode("utf-8")))
        pos += 4 + n
    if pos != len(blob):
        raise FormatError("trailing bytes after the summary")
    return rows[:-1], rows[-1]


def save_eval_records(path, records, summary):
    _atomic_write(path, encode_eval_records(records, summary))


def load_eval_records(path):
    with open(path, "rb") as fh:
        return decode_eval_records(fh.read())
