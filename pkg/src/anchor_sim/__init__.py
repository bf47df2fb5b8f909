"""anchor-sim: a deterministic desk-scale simulation stack for closed-loop
mobile manipulation with reachability-shell base alignment, physically
anchored planning, and hierarchical failure recovery."""

__version__ = "0.1.0"
