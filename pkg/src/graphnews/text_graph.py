"""Co-occurrence graphs over token sequences.

A sentence becomes one graph: every token occurrence is its own node
(duplicate words get duplicate nodes), positions closer than the context
window are linked by a symmetric edge pair, and every node carries a
self-loop. Graphs batch into a disjoint union with a per-node membership
vector so a whole batch runs through the graph layers in one pass.

All functions here are pure and operate on immutable values; they are safe
to call from concurrent data-loading workers.
"""

from collections import Counter
from dataclasses import dataclass

from .errors import EmptyBatchError, EmptyCorpusError, EmptyTextError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

DEFAULT_WINDOW_SIZE = 2


@dataclass(frozen=True)
class Vocab:
    """Token/id bijection with reserved padding and unknown ids.

    Ids 0 and 1 are always PAD and UNK; corpus tokens start at 2, ordered
    by descending frequency with lexicographic tie-breaking so the same
    corpus always yields the same table.
    """

    token_to_id: dict
    id_to_token: tuple

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_for(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    @classmethod
    def from_tokens(cls, tokens) -> "Vocab":
        """Build a Vocab from an already-ordered iterable of corpus tokens."""
        id_to_token = (PAD_TOKEN, UNK_TOKEN) + tuple(tokens)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        return cls(token_to_id=token_to_id, id_to_token=id_to_token)


@dataclass(frozen=True)
class TokenSeq:
    """A sentence as vocabulary ids, in original token order."""

    ids: tuple

    @property
    def length(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class SentenceGraph:
    """One sentence as a graph: a node per token occurrence.

    Edges are directed pairs; the set always contains exactly one
    self-loop per node and both directions of every window link.
    """

    num_nodes: int
    edges: tuple
    node_token_ids: tuple


@dataclass(frozen=True)
class BatchedGraph:
    """Disjoint union of sentence graphs with per-node graph membership."""

    node_token_ids: tuple
    edges: tuple
    batch_vector: tuple
    graph_count: int

    @property
    def num_nodes(self) -> int:
        return len(self.node_token_ids)


def build_vocab(corpus, min_freq: int = 1) -> Vocab:
    """Count tokens over cleaned texts and keep those seen >= min_freq times.

    Ids are assigned by descending frequency, ties broken lexicographically,
    starting after the reserved PAD/UNK slots.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus:
        counts.update(text.lower().split())
    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocab.from_tokens(kept)


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    """Map a cleaned text to vocabulary ids (UNK for out-of-vocabulary)."""
    tokens = text.lower().split()
    if not tokens:
        raise EmptyTextError("no tokens survive tokenization")
    return TokenSeq(ids=tuple(vocab.id_for(tok) for tok in tokens))


def sentence_to_graph(seq: TokenSeq, window_size: int = DEFAULT_WINDOW_SIZE) -> SentenceGraph:
    """Build the co-occurrence graph of a token sequence.

    Positions i and j are linked iff 0 < |i - j| < window_size, plus one
    self-loop per node. A window of 2 therefore links adjacent tokens into
    a chain. Overlapping windows never duplicate an edge.
    """
    if window_size < 1:
        raise ValueError(f"window_size must be >= 1, got {window_size}")
    if seq.length < 1:
        raise EmptyTextError("cannot build a graph from an empty sequence")
    n = seq.length
    edges = [(i, i) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, min(i + window_size, n)):
            edges.append((i, j))
            edges.append((j, i))
    return SentenceGraph(num_nodes=n, edges=tuple(edges), node_token_ids=seq.ids)


def batch_graphs(graphs) -> BatchedGraph:
    """Concatenate graphs into one, offsetting node indices per member."""
    graphs = list(graphs)
    if not graphs:
        raise EmptyBatchError("cannot batch zero graphs")
    node_ids = []
    edges = []
    batch_vector = []
    offset = 0
    for g, graph in enumerate(graphs):
        node_ids.extend(graph.node_token_ids)
        edges.extend((src + offset, dst + offset) for src, dst in graph.edges)
        batch_vector.extend([g] * graph.num_nodes)
        offset += graph.num_nodes
    return BatchedGraph(
        node_token_ids=tuple(node_ids),
        edges=tuple(edges),
        batch_vector=tuple(batch_vector),
        graph_count=len(graphs),
    )


def unbatch_graphs(batched: BatchedGraph):
    """Invert batch_graphs, recovering the member graphs node-for-node."""
    sizes = [0] * batched.graph_count
    for g in batched.batch_vector:
        sizes[g] += 1
    offsets = [0]
    for size in sizes[:-1]:
        offsets.append(offsets[-1] + size)
    per_graph_edges = [[] for _ in range(batched.graph_count)]
    for src, dst in batched.edges:
        g = batched.batch_vector[src]
        per_graph_edges[g].append((src - offsets[g], dst - offsets[g]))
    graphs = []
    for g in range(batched.graph_count):
        lo, size = offsets[g], sizes[g]
        graphs.append(
            SentenceGraph(
                num_nodes=size,
                edges=tuple(per_graph_edges[g]),
                node_token_ids=batched.node_token_ids[lo : lo + size],
            )
        )
    return graphs


def graph_dump(graph: SentenceGraph) -> str:
    """Render the line format used by the graph-inspect command."""
    lines = [f"N {graph.num_nodes}"]
    lines.extend(f"E {src} {dst}" for src, dst in graph.edges)
    return "\n".join(lines)
