# Sparse dictionary identification of dynamical systems trained through ODE solvers
