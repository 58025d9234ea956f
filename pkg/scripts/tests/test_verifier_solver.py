import unittest
import sys
import os
import random
from itertools import product

import networkx as nx
import pytest

# Add scripts dir to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from history_builder import build_history
from verifier_constraints import gen_constraints
from verifier_history import ExtendedHistory, RejectReason, merge_fragment
from verifier_oracle import replay
from verifier_solver import (
    Choice,
    OnlineTopoOrder,
    SolverInstance,
    TimeBudgetExceeded,
    _Search,
    check_certificate,
    encode,
    export,
    extract_schedule,
    parse_instance,
    shrink_core,
    solve,
)


def instance_for(h, session_order=False):
    acc = ExtendedHistory()
    merge_fragment(acc, h, session_order=session_order)
    con = gen_constraints(acc.graph, acc.readfrom, acc.wwpairs, acc.writers_by_key(), add_edge=acc.add_edge)
    return acc, encode(acc.graph, con)


POLYGRAPH_EXAMPLE = build_history((1, 1, 0, "w:x:1"), (2, 2, 0, "w:x:2"), (3, 3, 0, "r:x:1"))


def brute_force(inst: SolverInstance) -> bool:
    for picks in product((0, 1), repeat=len(inst.choices)):
        g = nx.DiGraph()
        g.add_nodes_from(range(inst.n))
        g.add_edges_from(inst.fixed_edges)
        for ch, s in zip(inst.choices, picks):
            g.add_edges_from(ch.side(s))
        if nx.is_directed_acyclic_graph(g):
            return True
    return False


def random_instance(rng: random.Random) -> SolverInstance:
    n = rng.randint(2, 8)
    perm = list(range(n))
    rng.shuffle(perm)
    fixed = sorted({(perm[i], perm[j]) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.15})

    def side():
        edges = set()
        for _ in range(rng.randint(1, 2)):
            u, v = rng.sample(range(n), 2)
            edges.add((u, v))
        return sorted(edges)

    choices = [Choice(side(), side()) for _ in range(rng.randint(0, 6))]
    return SolverInstance(n=n, fixed_edges=fixed, choices=choices)


class TestOnlineTopoOrder(unittest.TestCase):

    def test_reorders_and_detects_cycles(self):
        topo = OnlineTopoOrder(4)
        self.assertIsNone(topo.add_edge(3, 2))
        self.assertIsNone(topo.add_edge(2, 1))
        self.assertLess(topo.ord[3], topo.ord[1])
        self.assertEqual(topo.add_edge(1, 3), [1, 3, 2, 1])
        topo.remove_edge(2, 1)
        self.assertIsNone(topo.add_edge(1, 3))

    def test_multiplicity(self):
        topo = OnlineTopoOrder(2)
        topo.add_edge(0, 1)
        topo.add_edge(0, 1)
        topo.remove_edge(0, 1)
        self.assertIsNotNone(topo.add_edge(1, 0))
        self.assertEqual(topo.add_edge(1, 1), [1, 1])

    def test_cycle_with_leaves_graph_and_order_alone(self):
        topo = OnlineTopoOrder(4)
        topo.add_edge(0, 1)
        topo.add_edge(1, 2)
        before = list(topo.ord)
        self.assertEqual(topo.cycle_with([(2, 0)]), [0, 1, 2, 0])
        self.assertEqual(topo.cycle_with([(2, 3), (3, 0)]), [0, 1, 2, 3, 0])
        self.assertIsNone(topo.cycle_with([(0, 2), (2, 3)]))
        self.assertIsNone(topo.cycle_with([(3, 0)]))
        self.assertEqual(topo.cycle_with([(3, 3)]), [3, 3])
        self.assertEqual(topo.ord, before)
        self.assertNotIn(0, topo.out[2])


class TestEncode(unittest.TestCase):

    def test_polygraph_example_instance(self):
        _, inst = instance_for(POLYGRAPH_EXAMPLE)
        self.assertEqual(inst.n, 3)
        self.assertEqual(inst.labels, [1, 2, 3])
        self.assertEqual(inst.fixed_edges, [(0, 2)])
        self.assertEqual(len(inst.choices), 1)
        self.assertEqual(inst.choices[0].a, [(2, 1)])
        self.assertEqual(inst.choices[0].b, [(1, 0)])

    def test_export_round_trip(self):
        _, inst = instance_for(POLYGRAPH_EXAMPLE)
        text = export(inst)
        self.assertEqual(text.splitlines()[0], "n 3")
        self.assertEqual(parse_instance(text), inst)

    def test_parse_instance_errors(self):
        for bad in ("", "e 0 1", "n 2\nc 1 1\na 0 1", "n 2\nz 0 1"):
            with self.assertRaises(ValueError):
                parse_instance(bad)


def test_no_constraints_accepts_without_search():
    verdict = solve(SolverInstance(n=3, fixed_edges=[(0, 1), (1, 2)]))
    assert verdict.accepted
    assert verdict.choices == []


def test_fixed_cycle_rejects():
    verdict = solve(SolverInstance(n=3, fixed_edges=[(0, 1), (1, 2), (2, 0)]))
    assert verdict.reason == RejectReason.KNOWN_CYCLE
    assert verdict.cycles[0][0] == verdict.cycles[0][-1]
    assert set(verdict.cycles[0]) == {0, 1, 2}


def test_polygraph_example_accepts_with_writer_order():
    acc, inst = instance_for(POLYGRAPH_EXAMPLE)
    verdict = solve(inst)
    assert verdict.accepted
    assert verdict.edges in ([(3, 2)], [(2, 1)])
    schedule = extract_schedule(verdict, acc.graph)
    assert replay(POLYGRAPH_EXAMPLE, schedule)


def test_two_chains_accept_either_order():
    h = build_history((1, 1, 0, "w:x:1"), (2, 2, 0, "r:x:1 w:x:2"), (3, 3, 0, "w:x:3"), (4, 4, 0, "r:x:3 w:x:4"))
    acc, inst = instance_for(h)
    verdict = solve(inst)
    assert verdict.accepted
    assert verdict.edges in ([(2, 3)], [(4, 1)])
    assert replay(h, extract_schedule(verdict, acc.graph))


def test_coalesced_example_schedule_replays():
    h = build_history((1, 1, 0, "w:x:1"), (2, 2, 0, "w:x:2"), (3, 3, 0, "r:x:1"), (4, 4, 0, "r:x:1"), (5, 5, 0, "r:x:2"))
    acc, inst = instance_for(h)
    verdict = solve(inst)
    schedule = extract_schedule(verdict, acc.graph)
    assert replay(h, schedule)
    pos = {t: i for i, t in enumerate(schedule)}
    readers_of_1_first = pos[3] < pos[2] and pos[4] < pos[2]
    readers_of_2_first = pos[5] < pos[1]
    assert readers_of_1_first != readers_of_2_first


def test_single_session_schedule_is_session_order():
    h = build_history((7, 1, 0, "w:x:1"), (3, 1, 1, "w:x:2"), (5, 1, 2, "r:x:2"))
    acc, inst = instance_for(h, session_order=True)
    verdict = solve(inst)
    assert extract_schedule(verdict, acc.graph) == [7, 3, 5]


@pytest.mark.parametrize("seed", range(300))
def test_agrees_with_exhaustive_enumeration(seed):
    inst = random_instance(random.Random(seed))
    verdict = solve(inst)
    assert verdict.accepted == brute_force(inst)
    if verdict.accepted:
        g = nx.DiGraph()
        g.add_nodes_from(range(inst.n))
        g.add_edges_from(inst.fixed_edges)
        g.add_edges_from(verdict.edges)
        assert nx.is_directed_acyclic_graph(g)
        assert len(verdict.choices) == len(inst.choices)
    else:
        assert check_certificate(inst, verdict)


def test_certificate_check_rejects_foreign_edges():
    inst = SolverInstance(n=3, fixed_edges=[(0, 1)], choices=[Choice([(1, 0)], [(1, 2), (2, 0)])])
    verdict = solve(inst)
    assert not verdict.accepted
    assert check_certificate(inst, verdict)
    verdict.constraints = []
    assert not check_certificate(inst, verdict)


def test_time_budget():
    choices = [Choice([(2 * i, 2 * i + 1)], [(2 * i + 1, 2 * i)]) for i in range(200)]
    with pytest.raises(TimeBudgetExceeded):
        solve(SolverInstance(n=400, choices=choices), time_budget=1e-9)


def test_independent_constraints_settle_without_decisions():
    choices = [Choice([(2 * i, 2 * i + 1)], [(2 * i + 1, 2 * i)]) for i in range(3000)]
    search = _Search(SolverInstance(n=6000, choices=choices), None)
    verdict = search.run()
    assert verdict.accepted
    assert search.decisions == 0
    assert search.side_checks <= 2 * len(choices)


def test_only_constraints_spanning_new_edges_are_checked_again():
    # c0 is forced to 1 -> 2; the rest sit on unrelated vertices above it
    choices = [Choice([(1, 0)], [(1, 2)])] + [Choice([(3 + 2 * i, 4 + 2 * i)], [(4 + 2 * i, 3 + 2 * i)]) for i in range(50)]
    search = _Search(SolverInstance(n=103, fixed_edges=[(0, 1)], choices=choices), None)
    assert search.run().accepted
    assert search.assign[0] == 1
    assert search.side_checks == 2 * len(choices)


def test_shrinking_drops_bystanders():
    # c0 alone is unsatisfiable against 0 -> 1 -> 2; c1 lives elsewhere
    inst = SolverInstance(
        n=5, fixed_edges=[(0, 1), (1, 2)],
        choices=[Choice([(1, 0)], [(2, 1)]), Choice([(3, 4)], [(4, 3)])],
    )
    core, cycles, conflicting = shrink_core(inst, [0, 1], [], 1)
    assert (core, conflicting) == ([0], 0)
    reject = solve(inst)
    reject.constraints, reject.cycles = core, cycles
    assert check_certificate(inst, reject)


@pytest.mark.parametrize("seed", range(300))
def test_blamed_constraints_alone_are_unsatisfiable(seed):
    inst = random_instance(random.Random(seed))
    verdict = solve(inst)
    if verdict.accepted or verdict.reason != RejectReason.UNSATISFIABLE:
        return
    core = SolverInstance(n=inst.n, fixed_edges=inst.fixed_edges, choices=[inst.choices[i] for i in verdict.constraints])
    assert not brute_force(core)
    assert check_certificate(inst, verdict)
