from dataclasses import dataclass

from utils.model import mass_action


class InapplicableError(ValueError):
    pass


@dataclass(frozen=True)
class GirsanovScore:
    """
    Likelihood-ratio score f(X(T)) · M(T) / θ.

    Attributes
    ----------
    value : float
    martingale_terminal : float
        N(T) minus the integrated propensity of the sensitive reaction.
    firings : int
        Number of firings N(T) of the sensitive reaction up to T.
    """
    value: float
    martingale_terminal: float
    firings: int


def sensitive_reaction(net):
    """Index of the single reaction whose rate constant is θ; raise InapplicableError otherwise."""
    channels = net.sensitive_reactions
    if len(channels) != 1:
        raise InapplicableError(
            f"Girsanov estimator needs θ ('{net.params.sensitive}') in exactly one reaction, found {len(channels)}"
        )
    return channels[0]


def check_applicable(net):
    if net.theta <= 0:
        raise InapplicableError(f"Girsanov estimator cannot be used for θ = {net.theta}: it divides by θ")
    return sensitive_reaction(net)


def score_girsanov(net, f, T, traj):
    """
    Girsanov score of one trajectory simulated at θ = net.theta.

    The compensator ∫_0^T λ_{k0}(X(s)) ds is summed exactly over the holding times.
    """
    k0 = check_applicable(net)
    if traj.t_end < T and not traj.absorbed:
        raise ValueError(f"Trajectory covers [0, {traj.t_end}] but T = {T}")
    theta = net.theta
    terms = net.terms[k0]
    times = traj.jump_times
    firings = 0
    compensator = 0.0
    for i, state in enumerate(traj.states):
        start = times[i]
        if start >= T:
            break
        end = min(times[i + 1], T) if i + 1 < len(times) else T
        compensator += theta * mass_action(terms, state) * (end - start)
        if i + 1 < len(times) and times[i + 1] <= T and traj.reaction_ids[i] == k0:
            firings += 1
    martingale = firings - compensator
    return GirsanovScore(
        value=f(traj.state_at(T)) * martingale / theta,
        martingale_terminal=martingale,
        firings=firings,
    )
