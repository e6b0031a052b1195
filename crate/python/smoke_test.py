#!/usr/bin/env python3
"""Smoke test for the hpcwaas_py extension module.

Builds the extension with cargo if needed, loads it straight from the target
directory, and exercises every exported surface: descriptor parsing and
validation, the snapshot-memory estimate, the randomized SVD against a
numpy-free reconstruction check, the advisor, the vault, and the bundled
exemplar runs.

Usage: python3 python/smoke_test.py
"""

import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    so = REPO / "target" / "debug" / "libhpcwaas_py.so"
    if not so.exists():
        subprocess.run(["cargo", "build", "-p", "hpcwaas-py"], cwd=REPO, check=True)
    staging = pathlib.Path(tempfile.mkdtemp(prefix="hpcwaas-py-"))
    shutil.copy2(so, staging / "hpcwaas_py.so")
    sys.path.insert(0, str(staging))
    import hpcwaas_py

    return hpcwaas_py


def main():
    hp = load_module()
    checks = 0

    # Descriptor parsing and validation against the shipped fixture.
    text = (REPO / "fixtures" / "workflows" / "rom.yaml").read_text()
    desc = hp.parse_descriptor(text)
    assert desc["name"] == "rom"
    assert [n["name"] for n in desc["nodes"]] == ["ingest", "main"]
    assert hp.validate_descriptor(text) == []
    bad = text.replace("pipelines: [ingest]", "pipelines: [nonexistent]")
    assert hp.validate_descriptor(bad), "missing pipeline node must be flagged"
    try:
        hp.parse_descriptor("nodes: [")
        raise AssertionError("syntax error must raise")
    except ValueError:
        pass
    checks += 1

    # Snapshot memory estimate.
    assert hp.estimate_snapshot_memory(10_000_000, 5000) == 400_000_000_000
    checks += 1

    # Randomized SVD: reconstruct an exactly rank-2 matrix.
    rows, cols, rank = 30, 12, 2
    u_gen = [[math.sin(0.3 * i * (j + 1)) for j in range(rank)] for i in range(rows)]
    v_gen = [[math.cos(0.2 * i * (j + 1)) for j in range(rank)] for i in range(cols)]
    a = [[sum(u_gen[i][k] * v_gen[j][k] for k in range(rank)) for j in range(cols)] for i in range(rows)]
    u, s, v = hp.rsvd(a, rank, oversample=4, seed=7)
    recon = [
        [sum(u[i][k] * s[k] * v[j][k] for k in range(rank)) for j in range(cols)]
        for i in range(rows)
    ]
    err = max(abs(a[i][j] - recon[i][j]) for i in range(rows) for j in range(cols))
    assert err < 1e-9, f"rank-2 reconstruction error {err}"
    assert s[0] >= s[1] > 1e-9
    checks += 1

    # The analytic field used by the ROM exemplar spans exactly `modes` modes.
    field = hp.fom_field(50, 0.9, 3)
    assert len(field) == 50 and field[0] == 0.0
    checks += 1

    # Advisor: exact nearest-neighbour recall and argmin recommendation.
    adv = hp.Advisor()
    law = lambda n, c: 100.0 * 8.0 / (n * c) + 2.0 * (n * c)
    grid = [{"nodes": float(n), "cores": float(c)} for n in (1, 2, 4) for c in (1.0, 2.0, 4.0)]
    for cfg in grid:
        adv.record_profile("grid", "solve", cfg, law(cfg["nodes"], cfg["cores"]), 1.0)
    for cfg in grid:
        assert adv.predict_duration("grid", "solve", cfg, k=1) == law(cfg["nodes"], cfg["cores"])
    best = adv.recommend_config("grid", "solve", grid)
    oracle = min(grid, key=lambda c: (adv.predict_duration("grid", "solve", c), sorted(c.items())))
    assert best == oracle
    checks += 1

    # Vault: ids and public parts come out, secret material never does.
    vault = hp.Vault(["hpcA", "cloudA"])
    cred = vault.store_credential("ada", "hpcA", "super-secret-pw")
    assert cred.startswith("cred-") and "super-secret-pw" not in cred
    _, public = vault.generate_keypair("ada", "cloudA")
    assert public.startswith("pub-")
    token = vault.mint_token("ada", ["hpcA", "cloudA"], ttl_s=600)
    assert set(token) >= {"token_id", "user", "scope", "expires_at"}
    vault.revoke_token(token["token_id"])
    checks += 1

    # Exemplars: ROM converges, pruning saves node-seconds, urgent meets its
    # deadline with full completion on a roomy configuration.
    rom = hp.run_rom_pipeline(dofs=40, steps=6, rank=5)
    assert rom["converged"] and rom["succeeded"]
    esm = hp.run_ensemble_pruning()
    assert esm["pruned"] == [1, 4, 6]
    assert esm["node_seconds"] < esm["baseline_node_seconds"]
    uc = hp.run_urgent_ensemble(members=8, member_s=60, deadline_s=600)
    assert uc["completed"] == 8 and uc["terminal_s"] < 600
    checks += 1

    print(f"ok: {checks} smoke checks passed")


if __name__ == "__main__":
    main()
