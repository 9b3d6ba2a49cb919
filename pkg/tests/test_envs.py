import itertools

import numpy as np
import pytest

from optight import envs
from optight.envs import ChainEnv, GridMaze, Mdp, MdpEnv


def _two_state_mdp(p=0.7):
    # s0 -a-> s1 with prob p, else stays; s1 terminal
    P = np.zeros((2, 1, 2))
    P[0, 0] = [1 - p, p]
    P[1, 0, 1] = 1.0
    R = np.zeros((2, 1, 2))
    R[0, 0, 1] = 1.0
    return Mdp(P, R, [False, True], [1.0, 0.0])


def _simple_paths(maze):
    # Exhaustive DFS over simple paths; returns the shortest length found.
    best = None
    start, goal = maze.start, maze.goal

    def walk(cell, seen, n):
        nonlocal best
        if cell == goal:
            best = n if best is None else min(best, n)
            return
        for a in range(4):
            nxt = maze.move(cell, a)
            if nxt != cell and nxt not in seen:
                walk(nxt, seen | {nxt}, n + 1)

    walk(start, {start}, 0)
    return best


class TestStep:
    def test_chain_enters_terminal(self):
        env = ChainEnv(3)
        env.reset()
        env.step(ChainEnv.RIGHT)
        assert env.step(ChainEnv.RIGHT) == (2, 1.0, True)

    def test_chain_left_at_origin(self):
        env = ChainEnv(3)
        assert env.reset() == 0
        assert env.step(ChainEnv.LEFT) == (0, 0.0, False)

    def test_wall_keeps_agent(self):
        maze = GridMaze(3, 3, walls=[(0, 1)], step_reward=-0.1)
        maze.reset()
        assert maze.step(1) == (0, -0.1, False)  # right into the wall
        assert maze.step(0) == (0, -0.1, False)  # up off the grid

    def test_maze_goal(self):
        maze = GridMaze.corridor(3)
        maze.reset()
        maze.step(1)
        assert maze.step(1) == (2, 1.0, True)

    def test_out_of_range_action(self):
        env = ChainEnv(3)
        env.reset()
        with pytest.raises(ValueError):
            env.step(2)

    def test_step_after_terminal(self):
        env = ChainEnv(2)
        env.reset()
        env.step(ChainEnv.RIGHT)
        with pytest.raises(RuntimeError):
            env.step(ChainEnv.RIGHT)

    def test_step_before_reset(self):
        with pytest.raises(RuntimeError):
            GridMaze.corridor(3).step(1)

    def test_stochastic_frequency(self):
        env = MdpEnv(_two_state_mdp(0.7), seed=123)
        hits = 0
        n = 100_000
        for _ in range(n):
            env.reset()
            hits += env.step(0)[0] == 1
        assert abs(hits / n - 0.7) <= 0.01

    def test_noop_action(self):
        maze = GridMaze.corridor(4, with_noop=True)
        maze.reset()
        assert maze.noop_action == 4
        assert maze.step(4) == (0, 0.0, False)
        assert ChainEnv().noop_action is None

    def test_maze_rejects_bad_cells(self):
        with pytest.raises(ValueError):
            GridMaze(3, 3, walls=[(0, 0)])
        with pytest.raises(ValueError):
            GridMaze(3, 3, walls=[(1, 2), (2, 1)])  # goal walled in


class TestValueIteration:
    def test_chain(self):
        res = envs.value_iteration(envs.export_mdp(ChainEnv(3)), 0.9)
        assert res.q[1, ChainEnv.RIGHT] == pytest.approx(1.0, abs=1e-10)
        assert res.q[0, ChainEnv.RIGHT] == pytest.approx(0.9, abs=1e-10)
        np.testing.assert_array_equal(res.q[2], 0.0)

    def test_myopic(self):
        mdp = envs.export_mdp(GridMaze(3, 2, walls=[(0, 1)]))
        res = envs.value_iteration(mdp, 0.0)
        np.testing.assert_array_equal(res.q[~mdp.terminal], mdp.expected_reward[~mdp.terminal])

    def test_open_grid_matches_bfs(self):
        maze = GridMaze(5, 5, start=(0, 0), goal=(4, 4))
        n = envs.shortest_path_length(maze)
        assert n == 8
        res = envs.value_iteration(envs.export_mdp(maze), 0.95)
        assert res.v[maze.index(maze.start)] == pytest.approx(0.95 ** (n - 1), abs=1e-9)

    def test_walled_maze_matches_bfs(self):
        maze = GridMaze.from_ascii([
            "S..#..",
            ".#.#.#",
            ".#...#",
            ".####.",
            "......",
            "#.##.G",
        ])
        n = envs.shortest_path_length(maze)
        res = envs.value_iteration(envs.export_mdp(maze), 0.9)
        assert res.v[maze.index(maze.start)] == pytest.approx(0.9 ** (n - 1), abs=1e-9)

    def test_non_stochastic_rows(self):
        mdp = _two_state_mdp()
        mdp.transitions[0, 0, 0] = 0.5
        with pytest.raises(ValueError):
            envs.value_iteration(mdp, 0.9)
        with pytest.raises(ValueError):
            Mdp(mdp.transitions, mdp.rewards, mdp.terminal, mdp.initial)

    def test_terminal_must_self_loop(self):
        P = np.zeros((2, 1, 2))
        P[:, 0, 0] = 1.0
        with pytest.raises(ValueError):
            Mdp(P, np.zeros((2, 1)), [False, True], [1.0, 0.0])

    def test_bellman_residual(self):
        rng = np.random.default_rng(0)
        S, A = 6, 3
        P = rng.random((S, A, S))
        P /= P.sum(axis=2, keepdims=True)
        P[5] = 0.0
        P[5, :, 5] = 1.0
        P[:5] /= P[:5].sum(axis=2, keepdims=True)
        R = rng.normal(size=(S, A, S))
        R[5] = 0.0
        mdp = Mdp(P, R, [False] * 5 + [True], np.full(S, 1 / S))
        res = envs.value_iteration(mdp, 0.9, tol=1e-10)
        assert res.residual <= 1e-10
        r = mdp.expected_reward
        for s in range(5):
            for a in range(A):
                rhs = r[s, a] + 0.9 * P[s, a] @ res.q.max(axis=1)
                assert abs(res.q[s, a] - rhs) <= 1e-10
        np.testing.assert_array_equal(res.q[5], 0.0)

    def test_looser_tol_never_more_iterations(self):
        mdp = envs.export_mdp(GridMaze(4, 4, walls=[(1, 1), (2, 2)]))
        iters = [envs.value_iteration(mdp, 0.95, tol=t).iterations for t in (1e-12, 1e-9, 1e-6, 1e-3, 1e-1)]
        assert iters == sorted(iters, reverse=True)

    def test_bad_discount(self):
        with pytest.raises(ValueError):
            envs.value_iteration(_two_state_mdp(), 1.5)


class TestShortestPath:
    def test_adjacent(self):
        assert envs.shortest_path_length(GridMaze(2, 1, start=(0, 0), goal=(0, 1))) == 1

    @pytest.mark.parametrize("n", [2, 5, 8])
    def test_corridor(self, n):
        assert envs.shortest_path_length(GridMaze.corridor(n)) == n - 1

    def test_forced_detour_matches_exhaustive(self):
        maze = GridMaze.from_ascii([
            "S#.",
            ".#.",
            "..G",
        ])
        assert envs.shortest_path_length(maze) == _simple_paths(maze) == 4
        maze = GridMaze.from_ascii([
            "S.#..",
            "#.#.#",
            "..#..",
            ".###.",
            "....G",
        ])
        assert envs.shortest_path_length(maze) == _simple_paths(maze)

    def test_random_mazes_match_exhaustive(self):
        rng = np.random.default_rng(4)
        checked = 0
        while checked < 15:
            walls = [tuple(c) for c in np.argwhere(rng.random((4, 4)) < 0.3)]
            walls = [w for w in walls if w not in ((0, 0), (3, 3))]
            try:
                maze = GridMaze(4, 4, walls=walls)
            except ValueError:
                continue
            assert envs.shortest_path_length(maze) == _simple_paths(maze)
            checked += 1


class TestExport:
    def test_chain_kernel(self):
        mdp = envs.export_mdp(ChainEnv(3))
        assert (mdp.n_states, mdp.n_actions) == (3, 2)
        assert mdp.transitions[0, 1, 1] == 1.0 and mdp.transitions[1, 1, 2] == 1.0
        assert mdp.transitions[0, 0, 0] == 1.0
        assert mdp.rewards[1, 1, 2] == 1.0
        np.testing.assert_array_equal(mdp.terminal, [False, False, True])

    def test_grid_exhaustive_agreement(self):
        maze = GridMaze(3, 3, walls=[(1, 1)], step_reward=-0.5)
        mdp = envs.export_mdp(maze)
        assert mdp.n_states == 9
        goal = maze.index(maze.goal)
        for s, a in itertools.product(range(9), range(4)):
            if s == goal:
                continue
            nxt, r, done = maze.transition(s, a)
            assert mdp.transitions[s, a, nxt] == 1.0
            assert mdp.rewards[s, a, nxt] == r
            assert mdp.terminal[nxt] == done

    @pytest.mark.parametrize("env", [
        ChainEnv(5),
        GridMaze(3, 3, walls=[(1, 1)]),
        MdpEnv(_two_state_mdp(0.3), seed=1),
    ])
    def test_simulated_transitions_have_support(self, env):
        mdp = envs.export_mdp(env)
        rng = np.random.default_rng(9)
        s = env.reset()
        for _ in range(10_000):
            a = int(rng.integers(env.n_actions))
            nxt, r, done = env.step(a)
            assert mdp.transitions[s, a, nxt] > 0
            assert mdp.rewards[s, a, nxt] == r
            s = env.reset() if done else nxt


class TestMdpFile:
    def test_round_trip(self, tmp_path):
        mdp = envs.export_mdp(GridMaze(3, 2, walls=[(0, 1)], step_reward=-0.1))
        path = tmp_path / "m.mdp"
        envs.write_mdp(mdp, path)
        back = envs.read_mdp(path)
        np.testing.assert_array_equal(back.transitions, mdp.transitions)
        np.testing.assert_array_equal(back.rewards, mdp.rewards)
        np.testing.assert_array_equal(back.terminal, mdp.terminal)
        np.testing.assert_array_equal(back.initial, mdp.initial)

    def test_stochastic_round_trip(self):
        mdp = _two_state_mdp(0.3)
        back = envs.parse_mdp(envs.format_mdp(mdp))
        np.testing.assert_array_equal(back.transitions, mdp.transitions)

    def test_hand_written(self):
        text = """
        # three-state chain
        states 3
        actions 2
        terminal 2
        0 0 0 1 0
        0 1 1 1 0
        1 0 0 1 0
        1 1 2 1 1   # reward on entering s2
        """
        res = envs.value_iteration(envs.parse_mdp(text), 0.9)
        assert res.q[0, 1] == pytest.approx(0.9, abs=1e-10)

    @pytest.mark.parametrize("text", [
        "actions 1\n0 0 0 1 0\n",
        "states 2\nactions 1\n0 0 1 1\n",
        "states 2\nactions 1\n0 0 5 1 0\n",
        "states 2\nactions 1\n0 0 1 0.5 0\n1 0 1 1 0\n",
        "states 2\nactions 1\n0 0 x 1 0\n",
    ])
    def test_malformed(self, text):
        with pytest.raises(envs.MdpFormatError):
            envs.parse_mdp(text)
