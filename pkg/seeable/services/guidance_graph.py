"""
引导图服务
子区域邻接图、镜像对称、图距离与引导权重 G
"""

from collections import deque
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator

from ..core.exceptions import DomainError
from ..models.data_models import SubmaskScheme
from .discrepancy_factory import decode_label

SAME_POSITION_WEIGHT = 2.0 ** -2
SYMMETRIC_WEIGHT = 2.0 ** -1


class PatchGraph(BaseModel):
    """子区域邻接图(无向、无自环，边长固定为 1)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: int
    cols: int
    adjacency: np.ndarray
    distances: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_adjacency(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        n = self.rows * self.cols
        if adj.shape != (n, n):
            raise ValueError(f"邻接矩阵形状应为 ({n}, {n})")
        if not np.array_equal(adj, adj.T) or adj.diagonal().any():
            raise ValueError("邻接关系必须对称且无自环")
        self.adjacency = adj
        return self

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def neighbors(self, node: int):
        return np.flatnonzero(self.adjacency[node])

    def distance_matrix(self) -> np.ndarray:
        """所有节点对的最短跳数，首次调用时逐源 BFS 计算并缓存(不连通为 -1)"""
        if self.distances is None:
            table = np.full((self.n_nodes, self.n_nodes), -1, dtype=np.int64)
            for source in range(self.n_nodes):
                table[source] = _bfs(self, source)
            self.distances = table
        return self.distances


def _bfs(graph: PatchGraph, source: int) -> np.ndarray:
    dist = np.full(graph.n_nodes, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        node = queue.popleft()
        for nxt in graph.neighbors(node):
            if dist[nxt] < 0:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    return dist


def build_grid_graph(rows: int, cols: int) -> PatchGraph:
    """4 连通网格图，节点按行优先编号"""
    if rows < 1 or cols < 1:
        raise DomainError(f"网格行列数必须为正: {rows}x{cols}")
    n = rows * cols
    adjacency = np.zeros((n, n), dtype=bool)
    for node in range(n):
        r, c = divmod(node, cols)
        if c + 1 < cols:
            adjacency[node, node + 1] = adjacency[node + 1, node] = True
        if r + 1 < rows:
            adjacency[node, node + cols] = adjacency[node + cols, node] = True
    return PatchGraph(rows=rows, cols=cols, adjacency=adjacency)


def build_graph_for_scheme(scheme: SubmaskScheme) -> PatchGraph:
    """凸包方案退化为单节点图"""
    rows, cols = scheme.grid_shape
    return build_grid_graph(rows, cols)


def graph_distance(graph: PatchGraph, i: int, j: int) -> int:
    """最短路径跳数"""
    if not (0 <= i < graph.n_nodes and 0 <= j < graph.n_nodes):
        raise DomainError(f"节点越界: ({i}, {j})，节点数 {graph.n_nodes}")
    d = int(graph.distance_matrix()[i, j])
    if d < 0:
        raise DomainError(f"节点 {i} 与 {j} 不连通")
    return d


def sym(y_loc: int, rows: int, cols: int) -> int:
    """关于竖直中轴的镜像位置：(r, c) -> (r, cols - 1 - c)"""
    if not 0 <= y_loc < rows * cols:
        raise DomainError(f"位置越界: {y_loc}")
    r, c = divmod(y_loc, cols)
    return r * cols + (cols - 1 - c)


def guidance_weight(pred_y: int, true_y: int, graph: PatchGraph, n_type: int) -> float:
    """
    G(ŷ, y)：
      位置相同            -> 2^-2
      预测位置的镜像等于真实位置 -> 2^-1
      其他               -> d_graph(位置)
    """
    n_loc = graph.n_nodes
    pred_loc, _ = decode_label(pred_y, n_type, n_loc)
    true_loc, _ = decode_label(true_y, n_type, n_loc)
    if pred_loc == true_loc:
        return SAME_POSITION_WEIGHT
    if sym(pred_loc, graph.rows, graph.cols) == true_loc:
        return SYMMETRIC_WEIGHT
    return float(graph_distance(graph, pred_loc, true_loc))


def guidance_table(graph: PatchGraph, n_type: int) -> np.ndarray:
    """所有 (预测, 真实) 类别对的 G 值表"""
    n = graph.n_nodes * n_type
    table = np.empty((n, n), dtype=np.float64)
    for pred in range(n):
        for true in range(n):
            table[pred, true] = guidance_weight(pred, true, graph, n_type)
    return table


def save_distance_matrix(graph: PatchGraph, path: Union[str, Path]) -> Path:
    """以 CSV 导出距离矩阵(调试用)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nodes = range(graph.n_nodes)
    pd.DataFrame(graph.distance_matrix(), index=nodes, columns=nodes).to_csv(path)
    logger.info(f"距离矩阵已导出: {path}")
    return path
