"""ppforge: loop-condition machinery for finite digraphs and structures.

Builds primitive-positive derivations (with parameters and automorphism
ranks) that certify structural outcomes of smooth digraphs: loops and
quotient loops, invariant subsets, disjunction witnesses, hardness
interpretations.  Every emitted certificate replays from scratch.
"""

__version__ = "0.1.0"

FORMAT_VERSION = "1.0"
