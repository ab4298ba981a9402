"""Goal-conditioned end-to-end driving policy with map fusion."""
