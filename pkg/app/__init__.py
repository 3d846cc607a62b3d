# Obstacle SPDE Lab Package
