"""数值与梯度模块

基于 numpy float64 的稠密张量，支持反向模式自动微分、Adam 优化器、
有限差分梯度检验以及检查点读写。所有可训练阶段都建立在这里的接口之上。
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import CheckpointFormatError, NonFiniteError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LUPCKPT\x01"
CHECKPOINT_SCHEMA = "land-use-planner/checkpoint"
CHECKPOINT_VERSION = 1


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和还原到原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """不可变的 float64 张量，记录计算图用于反向传播"""

    __slots__ = ("_data", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False, name: str = "",
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable[[np.ndarray], tuple] | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"张量 {name or '<anonymous>'} 含有非有限值, shape={arr.shape}")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------
    # 基本属性
    # ------------------------------------------------------------------
    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ValueError(f"item() 只适用于单元素张量, 当前形状 {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # 图构造
    # ------------------------------------------------------------------
    @staticmethod
    def _lift(value: Any) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def _child(self, data: np.ndarray, parents: tuple["Tensor", ...],
               backward: Callable[[np.ndarray], tuple]) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                      _backward=backward if needs else None)

    # ------------------------------------------------------------------
    # 逐元素运算
    # ------------------------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        return self._child(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        return self._child(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other: Any) -> "Tensor":
        return Tensor._lift(other) - self

    def __mul__(self, other: Any) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        return self._child(a.data * b.data, (a, b),
                           lambda g: (_unbroadcast(g * b.data, a.shape),
                                      _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        return self._child(a.data / b.data, (a, b),
                           lambda g: (_unbroadcast(g / b.data, a.shape),
                                      _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Tensor._lift(other) / self

    def __neg__(self) -> "Tensor":
        return self._child(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        return self._child(a.data ** exponent, (a,),
                           lambda g: (g * exponent * a.data ** (exponent - 1),))

    def square(self) -> "Tensor":
        a = self
        return self._child(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return self._child(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return self._child(out, (a,), lambda g: (g / a.data,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return self._child(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        out = expit(self.data)
        return self._child(out, (self,), lambda g: (g * out * (1.0 - out),))

    def softplus(self) -> "Tensor":
        a = self
        return self._child(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))

    def clip(self, low: float, high: float) -> "Tensor":
        """截断到 [low, high]，截断处梯度为 0"""
        mask = (self.data >= low) & (self.data <= high)
        return self._child(np.clip(self.data, low, high), (self,), lambda g: (g * mask,))

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        exps = np.exp(shifted)
        out = exps / exps.sum(axis=axis, keepdims=True)

        def backward(g: np.ndarray) -> tuple:
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._child(out, (self,), backward)

    # ------------------------------------------------------------------
    # 归约与形状
    # ------------------------------------------------------------------
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> tuple:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._child(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.size / max(total.size, 1) if axis is not None else self.size
        return total / float(count)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return self._child(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes: int) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return self._child(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(*axes)

    def __getitem__(self, index: Any) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> tuple:
            full = np.zeros(a.shape)
            np.add.at(full, index, g)
            return (full,)

        return self._child(a.data[index], (a,), backward)

    def __matmul__(self, other: Any) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul 需要至少二维操作数, 得到 {a.shape} 和 {b.shape}")

        def backward(g: np.ndarray) -> tuple:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return self._child(a.data @ b.data, (a, b), backward)

    def __rmatmul__(self, other: Any) -> "Tensor":
        return Tensor._lift(other) @ self

    # ------------------------------------------------------------------
    # 反向传播
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """从标量出发反向传播，梯度累加到 Parameter.grad"""
        if self.size != 1:
            raise ValueError(f"backward 只能从标量开始, 当前形状 {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self._data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class Parameter(Tensor):
    """可训练参数：值、同形状梯度与名称"""

    __slots__ = ("grad",)

    def __init__(self, data: Any, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros(self.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.shape)

    def assign(self, values: Any) -> None:
        """整体替换参数值（形状必须一致）"""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise ValueError(f"参数 {self.name} 形状不匹配: {arr.shape} != {self.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"参数 {self.name} 被赋予非有限值")
        arr.flags.writeable = False
        self._data = arr


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """沿指定轴拼接张量"""
    parts = [Tensor._lift(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    data = np.concatenate([p.data for p in parts], axis=axis)
    needs = any(p.requires_grad for p in parts)

    def backward(g: np.ndarray) -> tuple:
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(data, requires_grad=needs, _parents=tuple(parts) if needs else (),
                  _backward=backward if needs else None)


def softmax_rows(x: Tensor | np.ndarray) -> Tensor:
    """逐行 softmax（减去行最大值保证数值稳定）

    Args:
        x: R×D 张量

    Returns:
        每行为概率向量的 R×D 张量
    """
    x = Tensor._lift(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows 需要二维输入, 得到 {x.shape}")
    return x.softmax(axis=-1)


def diag_gaussian_kl(mu: Tensor | np.ndarray, sigma: Tensor | np.ndarray) -> Tensor:
    """KL[N(mu, diag(sigma²)) || N(0, I)]，对所有元素求和

    Args:
        mu: 均值
        sigma: 标准差，必须严格为正

    Returns:
        标量张量 ½ Σ (μ² + σ² − ln σ² − 1)
    """
    mu = Tensor._lift(mu)
    sigma = Tensor._lift(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("diag_gaussian_kl 要求 sigma 严格为正")
    variance = sigma.square()
    return ((mu.square() + variance - variance.log() - 1.0).sum()) * 0.5


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamSet:
    """按名称有序管理一组参数"""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, values: Any) -> Parameter:
        full = f"{self.prefix}.{name}" if self.prefix else name
        if full in self._params:
            raise ValueError(f"参数名重复: {full}")
        param = Parameter(values, name=full)
        self._params[full] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        full = f"{self.prefix}.{name}" if self.prefix else name
        return self._params[full]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: param.numpy() for name, param in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = [name for name in self._params if name not in state]
        if missing:
            raise CheckpointFormatError(f"检查点缺少参数: {missing}")
        for name, param in self._params.items():
            param.assign(state[name])

    def digest(self) -> str:
        """参数值的 sha256 摘要"""
        hasher = hashlib.sha256()
        for name, param in self._params.items():
            hasher.update(name.encode("utf-8"))
            hasher.update(np.ascontiguousarray(param.data, dtype="<f8").tobytes())
        return hasher.hexdigest()


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                   samples: int = 100, step: float = 1e-5, seed: int = 0) -> float:
    """有限差分梯度检验

    Args:
        loss_fn: 无参可调用对象，返回标量损失；噪声必须在内部固定
        params: 需要检验的参数
        samples: 随机抽取的坐标数（坐标总数不足时全部检验）
        step: 中心差分步长
        seed: 坐标抽样种子

    Returns:
        最大相对误差 |a−n| / max(|a|, |n|, 1e-8)
    """
    for param in params:
        param.zero_grad()
    loss = loss_fn()
    if loss.item() != loss_fn().item():
        raise ValueError("固定噪声下 loss 不确定，无法做梯度检验")
    loss.backward()
    analytic = [param.grad.copy() for param in params]

    sizes = np.array([param.size for param in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= samples else np.sort(rng.choice(total, size=samples, replace=False))

    worst = 0.0
    for flat_index in picks:
        which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        local = int(flat_index - offsets[which])
        param = params[which]
        base = param.numpy()
        shifted = base.copy()
        shifted.flat[local] = base.flat[local] + step
        param.assign(shifted)
        f_plus = loss_fn().item()
        shifted.flat[local] = base.flat[local] - step
        param.assign(shifted)
        f_minus = loss_fn().item()
        param.assign(base)
        numeric = (f_plus - f_minus) / (2.0 * step)
        exact = float(analytic[which].flat[local])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        worst = max(worst, error)

    for param in params:
        param.zero_grad()
    logger.debug(f"梯度检验完成: {len(picks)} 个坐标, 最大相对误差 {worst:.3e}")
    return worst


@dataclass
class OptimizerState:
    """Adam 优化器状态"""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Sequence[Parameter]) -> Sequence[Parameter]:
    """带偏差校正的 Adam 更新；不清零梯度，由调用方负责"""
    state.step += 1
    t = state.step
    for param in params:
        m = state.first_moment.get(param.name)
        v = state.second_moment.get(param.name)
        if m is None:
            m = np.zeros(param.shape)
            v = np.zeros(param.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * param.grad
        v = state.beta2 * v + (1.0 - state.beta2) * param.grad * param.grad
        state.first_moment[param.name] = m
        state.second_moment[param.name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        param.assign(param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return params


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray],
                    metadata: Mapping[str, Any] | None = None) -> None:
    """写入检查点

    布局: 8 字节 magic | uint64 小端清单长度 | UTF-8 JSON 清单 | 小端 float64 数据块
    """
    entries = []
    payloads = []
    offset = 0
    for name, values in tensors.items():
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64)).astype("<f8", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "metadata": dict(metadata or {}),
        "tensors": entries,
    }, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in payloads:
            f.write(raw)
    logger.debug(f"保存检查点: {path} ({len(entries)} 个张量)")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """读取检查点，返回 (张量字典, 元数据)"""
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"不是检查点文件: {path}")
    header = len(CHECKPOINT_MAGIC)
    (manifest_len,) = struct.unpack_from("<Q", blob, header)
    start = header + 8
    try:
        manifest = json.loads(blob[start:start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"检查点清单损坏: {path}: {e}") from e
    if manifest.get("schema") != CHECKPOINT_SCHEMA or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"不支持的检查点版本: {manifest.get('schema')} v{manifest.get('version')}")
    payload = blob[start + manifest_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + 8 * entry["count"]
        if end > len(payload):
            raise CheckpointFormatError(f"检查点数据截断: {entry['name']}")
        values = np.frombuffer(payload, dtype="<f8", count=entry["count"], offset=entry["offset"])
        tensors[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return tensors, manifest["metadata"]
