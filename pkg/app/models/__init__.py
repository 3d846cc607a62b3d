# Data Models Package 