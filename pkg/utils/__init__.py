"""Grid, expression and root-finding utilities."""
