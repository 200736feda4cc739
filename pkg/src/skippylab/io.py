"""JSON serialization of an MDP together with its feature table.

Document layout (``format`` = "skippylab.mdp", ``version`` = 1)::

    {
      "format": "skippylab.mdp", "version": 1, "name": str,
      "H": int, "A": int, "d": int, "L1": float, "L2": float,
      "states": [
        {"id": int, "stage": int, "index": int,
         "actions": [
           {"next": [[state_id, prob], ...],        # empty at stage H
            "reward": [[value, prob], ...],
            "phi": [float, ...]},                    # length d
           ...                                       # one entry per action
         ]},
        ...                                          # ordered by id
      ]
    }

Stages are 1-based, ``index`` is the position within the stage and ``id`` the
global index. Floats are written with ``repr`` precision so a load/dump cycle is
exact.
"""
from __future__ import annotations

import json

import numpy as np

from .features import FeatureTable
from .mdp import Mdp

FORMAT = "skippylab.mdp"
VERSION = 1


def to_document(mdp, features):
    states = []
    for s in range(mdp.S):
        h, i = mdp.stage_index(s)
        actions = []
        for a in range(mdp.A):
            nxt = np.flatnonzero(mdp.P[s, a])
            keep = mdp.reward_probs[s, a] > 0
            actions.append({
                "next": [[int(j), float(mdp.P[s, a, j])] for j in nxt],
                "reward": [[float(v), float(p)] for v, p in
                           zip(mdp.reward_values[s, a][keep], mdp.reward_probs[s, a][keep])],
                "phi": [float(x) for x in features.phi[s, a]],
            })
        states.append({"id": s, "stage": h, "index": i, "actions": actions})
    return {
        "format": FORMAT, "version": VERSION, "name": mdp.name,
        "H": mdp.H, "A": mdp.A, "d": features.d, "L1": features.L1, "L2": features.L2,
        "states": states,
    }


def from_document(doc):
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise ValueError(f"not a {FORMAT} v{VERSION} document")
    H, A, d = int(doc["H"]), int(doc["A"]), int(doc["d"])
    states = sorted(doc["states"], key=lambda st: st["id"])
    S = len(states)
    sizes = [0] * H
    for st in states:
        sizes[st["stage"] - 1] += 1
    K = max(len(act["reward"]) for st in states for act in st["actions"])
    P = np.zeros((S, A, S))
    rv = np.zeros((S, A, K))
    rp = np.zeros((S, A, K))
    phi = np.zeros((S, A, d))
    for st in states:
        s = st["id"]
        if len(st["actions"]) != A:
            raise ValueError(f"state {s} lists {len(st['actions'])} actions, expected {A}")
        for a, act in enumerate(st["actions"]):
            for j, p in act["next"]:
                P[s, a, int(j)] = p
            for m, (v, p) in enumerate(act["reward"]):
                rv[s, a, m], rp[s, a, m] = v, p
            phi[s, a] = act["phi"]
    mdp = Mdp(tuple(sizes), A, P, rv, rp, name=doc.get("name", "mdp"))
    return mdp, FeatureTable(phi, L1=doc["L1"], L2=doc["L2"])


def dumps(mdp, features):
    return json.dumps(to_document(mdp, features), indent=1)


def loads(text):
    return from_document(json.loads(text))


def save(path, mdp, features):
    with open(path, "w") as fh:
        fh.write(dumps(mdp, features))


def load(path):
    with open(path) as fh:
        return loads(fh.read())
