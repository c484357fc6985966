import json
import math

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match
from referencing import Registry, Resource

MAX_REACTION_ORDER = 3

ROOT_DIR = Path(__file__).resolve().parent.parent
SCHEMA_DIR = ROOT_DIR / "schemas"
MODEL_DIR = ROOT_DIR / "models"

BUILTIN_MODELS = {
    "pure-birth": MODEL_DIR / "pure_birth.json",
    "birth-death": MODEL_DIR / "birth_death.json",
    "gene-expression": MODEL_DIR / "gene_expression.json",
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Species:
    name: str
    index: int


@dataclass(frozen=True)
class Reaction:
    """A mass-action reaction channel.

    Attributes
    ----------
    reactants : dict[str, int]
        Species name -> multiplicity consumed by one firing.
    products : dict[str, int]
        Species name -> multiplicity produced by one firing.
    rate_param : str
        Name of the parameter holding the rate constant.
    stoich : tuple[int, ...]
        Stoichiometric vector (products minus reactants), one entry per species.
    """
    reactants: dict
    products: dict
    rate_param: str
    stoich: tuple

    @property
    def order(self):
        return sum(self.reactants.values())

    def __hash__(self):
        return hash((tuple(sorted(self.reactants.items())), tuple(sorted(self.products.items())), self.rate_param))


def make_reaction(species_names, reactants, products, rate_param):
    """Build a Reaction, deriving its stoichiometric vector from the reactant/product multisets."""
    for side, counts in (("reactants", reactants), ("products", products)):
        for name, count in counts.items():
            if name not in species_names:
                raise ModelError(f"Reaction with rate '{rate_param}' references unknown species '{name}' in {side}")
            if int(count) != count or count < 0:
                raise ModelError(f"Reaction with rate '{rate_param}' has invalid multiplicity {count} for '{name}'")
    reactants = {name: int(count) for name, count in reactants.items() if count}
    products = {name: int(count) for name, count in products.items() if count}
    stoich = tuple(products.get(name, 0) - reactants.get(name, 0) for name in species_names)
    return Reaction(reactants=reactants, products=products, rate_param=rate_param, stoich=stoich)


@dataclass(frozen=True)
class ParameterSet:
    values: dict
    sensitive: str

    def __post_init__(self):
        if self.sensitive not in self.values:
            raise ModelError(f"Sensitive parameter '{self.sensitive}' is not defined")
        for name, value in self.values.items():
            if not math.isfinite(value) or value < 0:
                raise ModelError(f"Parameter '{name}' must be a finite non-negative number, got {value}")

    @property
    def theta(self):
        return self.values[self.sensitive]

    def __hash__(self):
        return hash((tuple(sorted(self.values.items())), self.sensitive))


@dataclass(frozen=True)
class Observable:
    """Affine observable f(x) = <coeffs, x> + offset."""
    coeffs: tuple
    offset: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.coeffs) or not math.isfinite(self.offset):
            raise ModelError("Observable coefficients must be finite")

    def __call__(self, x):
        return sum(c * xi for c, xi in zip(self.coeffs, x)) + self.offset

    def delta(self, x, zeta):
        """Increment f(x + zeta) - f(x)."""
        return sum(c * z for c, z in zip(self.coeffs, zeta))

    @classmethod
    def species_count(cls, net, name):
        """Observable returning the copy number of one species."""
        coeffs = [0.0] * net.d
        coeffs[net.species_index(name)] = 1.0
        return cls(coeffs=tuple(coeffs))


@dataclass(frozen=True)
class ReactionNetwork:
    """
    A chemical reaction network with mass-action propensities.

    Attributes
    ----------
    species : tuple[Species, ...]
        Species with contiguous 0-based indices.
    reactions : tuple[Reaction, ...]
        The K reaction channels.
    params : ParameterSet
        Rate constants and the name of the sensitive parameter θ.
    x0 : tuple[int, ...]
        Initial copy numbers.
    """
    species: tuple
    reactions: tuple
    params: ParameterSet
    x0: tuple
    terms: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [s.name for s in self.species]
        if not names:
            raise ModelError("A network needs at least one species")
        if len(set(names)) != len(names):
            duplicates = sorted({n for n in names if names.count(n) > 1})
            raise ModelError(f"Duplicate species name(s): {', '.join(duplicates)}")
        if [s.index for s in self.species] != list(range(len(names))):
            raise ModelError("Species indices must be contiguous from 0")
        if len(self.x0) != len(names):
            raise ModelError(f"x0 has {len(self.x0)} entries for {len(names)} species")
        if any(int(v) != v or v < 0 for v in self.x0):
            raise ModelError(f"x0 must hold non-negative integers, got {list(self.x0)}")
        for k, reaction in enumerate(self.reactions):
            if reaction.rate_param not in self.params.values:
                raise ModelError(f"Reaction {k} references unknown parameter '{reaction.rate_param}'")
            if len(reaction.stoich) != len(names):
                raise ModelError(f"Reaction {k} stoichiometry has wrong length")
            if reaction.order > MAX_REACTION_ORDER:
                raise ModelError(f"Reaction {k} has order {reaction.order} > {MAX_REACTION_ORDER}")
        object.__setattr__(self, "x0", tuple(int(v) for v in self.x0))
        # (species index, multiplicity) pairs used by the falling-factorial product
        object.__setattr__(self, "terms", tuple(
            tuple((names.index(name), m) for name, m in sorted(r.reactants.items()))
            for r in self.reactions
        ))

    @property
    def d(self):
        return len(self.species)

    @property
    def K(self):
        return len(self.reactions)

    @property
    def theta(self):
        return self.params.theta

    @property
    def species_names(self):
        return [s.name for s in self.species]

    def species_index(self, name):
        for s in self.species:
            if s.name == name:
                return s.index
        raise ModelError(f"Unknown species '{name}'")

    @cached_property
    def stoich(self):
        return tuple(r.stoich for r in self.reactions)

    @cached_property
    def sensitive_reactions(self):
        return tuple(k for k, r in enumerate(self.reactions) if r.rate_param == self.params.sensitive)

    def rate_constants(self, theta=None):
        """Rate constant of every reaction, with theta replacing the sensitive parameter when given."""
        values = self.params.values
        sensitive = self.params.sensitive
        return [
            float(theta) if theta is not None and r.rate_param == sensitive else float(values[r.rate_param])
            for r in self.reactions
        ]

    def with_theta(self, theta):
        """Copy of the network with the sensitive parameter set to theta."""
        values = dict(self.params.values)
        values[self.params.sensitive] = float(theta)
        return replace(self, params=ParameterSet(values=values, sensitive=self.params.sensitive))

    def with_sensitive(self, name):
        """Copy of the network with another parameter marked as sensitive."""
        return replace(self, params=ParameterSet(values=dict(self.params.values), sensitive=name))

    def __hash__(self):
        return hash((self.species, self.reactions, self.params, self.x0))


def make_network(species, reactions, params, sensitive, x0):
    """
    Convenience constructor.

    Parameters
    ----------
    species : list[str]
        Species names in index order.
    reactions : list[tuple[dict, dict, str]]
        (reactants, products, rate parameter name) per reaction.
    params : dict[str, float]
    sensitive : str
    x0 : list[int]
    """
    return ReactionNetwork(
        species=tuple(Species(name=name, index=i) for i, name in enumerate(species)),
        reactions=tuple(make_reaction(species, r, p, rate) for r, p, rate in reactions),
        params=ParameterSet(values={k: float(v) for k, v in params.items()}, sensitive=sensitive),
        x0=tuple(x0),
    )


def mass_action(terms, x):
    """Falling-factorial product prod_s x_s (x_s - 1) ... (x_s - m_s + 1); 0 when a reactant is short."""
    value = 1.0
    for s, m in terms:
        n = x[s]
        if n < m:
            return 0.0
        for j in range(m):
            value *= n - j
    return value


def _check_args(net, k, x):
    if not 0 <= k < net.K:
        raise IndexError(f"Reaction index {k} out of range for {net.K} reactions")
    if any(v < 0 for v in x):
        raise ModelError(f"Negative state component in {list(x)}")


def propensity(net, k, x, theta_override=None):
    """λ_k(x, θ) for mass-action kinetics."""
    _check_args(net, k, x)
    reaction = net.reactions[k]
    if theta_override is not None and reaction.rate_param == net.params.sensitive:
        rate = float(theta_override)
    else:
        rate = float(net.params.values[reaction.rate_param])
    return rate * mass_action(net.terms[k], x)


def propensity_dtheta(net, k, x):
    """∂λ_k(x, θ)/∂θ: the mass-action product when k is driven by the sensitive parameter, else 0."""
    _check_args(net, k, x)
    if net.reactions[k].rate_param != net.params.sensitive:
        return 0.0
    return mass_action(net.terms[k], x)


def total_propensity(net, x):
    """λ_0(x, θ) = sum of all propensities."""
    return sum(propensity(net, k, x) for k in range(net.K))


def propensities(net, x, rates):
    """Propensity vector for precomputed rate constants (hot path, no argument checks)."""
    return [c * mass_action(terms, x) if c else 0.0 for c, terms in zip(rates, net.terms)]


def dtheta_weights(net, x):
    """∂λ_k/∂θ for every k (hot path, no argument checks)."""
    sensitive = net.sensitive_reactions
    return [mass_action(net.terms[k], x) if k in sensitive else 0.0 for k in range(net.K)]


@dataclass(frozen=True)
class Violation:
    reaction: int
    condition: str
    message: str

    def __str__(self):
        return f"reaction {self.reaction}: condition ({self.condition}) {self.message}"


def validate(net):
    """
    Check the regularity conditions on the propensities statically.

    (A) and (B) hold for every mass-action network that is linear in θ.
    (C) requires that a firing enabled by the reactant multiplicities never drives a
    species negative. (D) is checked through the sufficient condition that every
    reaction with a net positive effect on the total population has order ≤ 1.

    Returns
    -------
    list[Violation]
        Empty when all conditions hold.
    """
    violations = []
    for k, reaction in enumerate(net.reactions):
        for name, species in zip(net.species_names, range(net.d)):
            consumed = -reaction.stoich[species]
            if consumed > reaction.reactants.get(name, 0):
                violations.append(Violation(
                    k, "C", f"removes {consumed} '{name}' but only requires {reaction.reactants.get(name, 0)}"
                ))
        if sum(reaction.stoich) > 0 and reaction.order > 1:
            violations.append(Violation(
                k, "D", f"has net positive effect {sum(reaction.stoich)} with order {reaction.order} > 1"
            ))
    return violations


def conditions(net):
    """Summary of conditions (A)-(D): True when satisfied."""
    failed = {v.condition for v in validate(net)}
    return {"A": True, "B": True, "C": "C" not in failed, "D": "D" not in failed}


@dataclass(frozen=True)
class ModelFile:
    network: ReactionNetwork
    observable: Observable
    T: float


def _schema_validator():
    resources = []
    for path in sorted(SCHEMA_DIR.glob("*.schema.json")):
        contents = json.loads(path.read_text(encoding="utf-8"))
        resources.append((contents["$id"], Resource.from_contents(contents)))
    registry = Registry().with_resources(resources)
    return Draft202012Validator(registry.contents("urn:stochsens:model"), registry=registry)


validator = _schema_validator()


def model_from_dict(doc, source="<model>"):
    """Build a ModelFile from a parsed model document, raising ModelError with field context."""
    error = best_match(validator.iter_errors(doc))
    if error is not None:
        raise ModelError(f"{source}: {error.json_path}: {error.message}")

    species = doc["species"]
    if len(set(species)) != len(species):
        duplicates = sorted({n for n in species if species.count(n) > 1})
        raise ModelError(f"{source}: $.species: duplicate species name(s): {', '.join(duplicates)}")
    if len(doc["x0"]) != len(species):
        raise ModelError(f"{source}: $.x0: expected {len(species)} entries, got {len(doc['x0'])}")
    if doc["sensitive"] not in doc["params"]:
        raise ModelError(f"{source}: $.sensitive: unknown parameter '{doc['sensitive']}'")
    for i, reaction in enumerate(doc["reactions"]):
        if reaction["rate"] not in doc["params"]:
            raise ModelError(f"{source}: $.reactions[{i}].rate: unknown parameter '{reaction['rate']}'")
        for side in ("reactants", "products"):
            for name in reaction[side]:
                if name not in species:
                    raise ModelError(f"{source}: $.reactions[{i}].{side}: unknown species '{name}'")
    for name in doc["observable"]["coeffs"]:
        if name not in species:
            raise ModelError(f"{source}: $.observable.coeffs: unknown species '{name}'")

    try:
        network = make_network(
            species,
            [(r["reactants"], r["products"], r["rate"]) for r in doc["reactions"]],
            doc["params"],
            doc["sensitive"],
            doc["x0"],
        )
    except ModelError as e:
        raise ModelError(f"{source}: {e}")
    coeffs = doc["observable"]["coeffs"]
    observable = Observable(
        coeffs=tuple(float(coeffs.get(name, 0.0)) for name in species),
        offset=float(doc["observable"].get("offset", 0.0)),
    )
    return ModelFile(network=network, observable=observable, T=float(doc["T"]))


def model_to_dict(model):
    net = model.network
    names = net.species_names
    return {
        "species": names,
        "x0": list(net.x0),
        "params": {name: float(value) for name, value in net.params.values.items()},
        "sensitive": net.params.sensitive,
        "reactions": [
            {"reactants": dict(r.reactants), "products": dict(r.products), "rate": r.rate_param}
            for r in net.reactions
        ],
        "observable": {
            "coeffs": {name: float(c) for name, c in zip(names, model.observable.coeffs) if c},
            "offset": float(model.observable.offset),
        },
        "T": float(model.T),
    }


def dump_model(model):
    """Canonical serialization: keys sorted, 2-space indent, trailing newline."""
    return json.dumps(model_to_dict(model), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def resolve_model_path(name_or_path):
    """Map a built-in model name (e.g. "birth-death") to its file, or return the given path."""
    if str(name_or_path) in BUILTIN_MODELS:
        return BUILTIN_MODELS[str(name_or_path)]
    return Path(name_or_path)


def load_model(path):
    """
    Read a model file.

    Parameters
    ----------
    path : str or Path
        Model file, or the name of a built-in model.

    Returns
    -------
    ModelFile
        The network, the observable and the horizon T.
    """
    path = resolve_model_path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ModelError(f"{path}: cannot read model file ({e.strerror})")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    return model_from_dict(doc, source=str(path))


def save_model(path, model):
    Path(path).write_text(dump_model(model), encoding="utf-8")
