"""Small graph executor used to run the pose estimation stages.

Stages are plain functions over a shared state dict. ``Node`` names one
stage, ``Edge`` links two stages and may be guarded by a predicate on the
state, and ``Graph`` holds both and runs them from the stages without
incoming edges.

Execution is queue-based with state passed from node to node. A node that
raises stops the run; the exception is kept on its log entry so callers can
re-raise it.
"""

import logging
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)


class NodeStatus(str, Enum):
    """Possible outcomes of node execution: success or error."""
    SUCCESS = "success"
    ERROR = "error"


@dataclass
class ExecutionEntry:
    """Record of a single node's execution in a run."""
    node_name: str
    status: NodeStatus
    elapsed: float
    error_message: Optional[str] = None
    error: Optional[BaseException] = None


class Node:
    """A named stage: ``func(state) -> state``."""

    def __init__(self, name: str, func: Callable[[Dict[str, Any]], Dict[str, Any]]):
        self.name = name
        self.func = func

    def execute(self, state: Dict[str, Any]) -> Tuple[Dict[str, Any], Optional[Exception]]:
        """Run the stage; returns (state, None) or (unchanged state, exception)."""
        try:
            # nodes work on a shallow copy
            return self.func(state.copy()), None
        except Exception as e:
            return state, e


class Edge:
    """source -> target, taken when ``condition(state)`` holds."""

    def __init__(self, source: str, target: str, condition: Optional[Callable[[Dict[str, Any]], bool]] = None):
        """``condition`` guards the edge; an unguarded edge is always taken."""
        self.source = source
        self.target = target
        self.condition = condition

    def should_execute(self, state: Dict[str, Any]) -> bool:
        """A condition that raises counts as false."""
        if self.condition is None:
            return True
        try:
            return bool(self.condition(state))
        except Exception:
            logger.debug("edge %s -> %s: condition raised, not taken", self.source, self.target)
            return False


class Graph:
    """A pipeline represented as a directed graph of nodes and edges."""

    def __init__(self, name: str):
        self.name = name
        self.nodes: Dict[str, Node] = {}
        self.edges: Dict[str, List[Edge]] = {}

    def add_node(self, name: str, func: Callable[[Dict[str, Any]], Dict[str, Any]]) -> None:
        """Register stage ``func`` as ``name``; re-adding a name replaces its stage, keeps its edges."""
        self.nodes[name] = Node(name, func)
        if name not in self.edges:
            self.edges[name] = []

    def add_edge(self, source: str, target: str,
                 condition: Optional[Callable[[Dict[str, Any]], bool]] = None) -> None:
        """Run ``target`` after ``source``, only when ``condition(state)`` holds if one is given.

        Raises:
            ValueError: If either stage is not registered
        """
        if source not in self.nodes or target not in self.nodes:
            raise ValueError(f"edge {source} -> {target} names an unknown stage")
        self.edges.setdefault(source, []).append(Edge(source, target, condition))

    def _successors(self, current_node: str, state: Dict[str, Any]) -> List[str]:
        return [edge.target for edge in self.edges.get(current_node, []) if edge.should_execute(state)]

    def entry_nodes(self) -> List[str]:
        """Nodes with no incoming edges, in insertion order."""
        incoming = {edge.target for edges in self.edges.values() for edge in edges}
        return [name for name in self.nodes if name not in incoming]

    def execute(
        self,
        initial_state: Dict[str, Any],
        start_nodes: Optional[List[str]] = None,
        max_iterations: int = 100
    ) -> Tuple[Dict[str, Any], List[ExecutionEntry]]:
        """Run stages breadth-first from ``start_nodes`` (default: :meth:`entry_nodes`).

        At most ``max_iterations`` stages run. Returns the final state and one
        log entry per stage that ran.
        """
        state = initial_state.copy()
        execution_log: List[ExecutionEntry] = []
        queue = list(start_nodes if start_nodes is not None else self.entry_nodes())
        iteration = 0

        while queue and iteration < max_iterations:
            iteration += 1
            node_name = queue.pop(0)
            if node_name not in self.nodes:
                continue

            started = time.perf_counter()
            state, error = self.nodes[node_name].execute(state)
            elapsed = time.perf_counter() - started

            if error is not None:
                logger.debug("%s/%s failed after %.3fs: %s", self.name, node_name, elapsed, error)
                execution_log.append(ExecutionEntry(node_name, NodeStatus.ERROR, elapsed, str(error), error))
                break
            execution_log.append(ExecutionEntry(node_name, NodeStatus.SUCCESS, elapsed))
            queue.extend(self._successors(node_name, state))

        return state, execution_log


def first_error(execution_log: List[ExecutionEntry]) -> Optional[ExecutionEntry]:
    """The failed entry of a run, if any."""
    return next((entry for entry in execution_log if entry.status is NodeStatus.ERROR), None)
