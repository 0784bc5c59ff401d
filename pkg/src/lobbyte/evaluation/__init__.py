"""Market-quality metrics, book replay and stylized-fact diagnostics."""
from .book import BookState, Lifecycle, Replay, replay_book, replay_iter
from .report import (HEADLINE, PRICE_SOURCES, Comparison, MetricsReport, build_report, compare_streams,
                     event_type_frequencies, microstructure_stats, return_prices, write_report)
from .stats import (FactResult, InsufficientData, LogReturns, ReturnStats, StylizedFacts,
                    autocorr, clustering_threshold, compute_log_returns, fat_tail_threshold,
                    hill_estimator, kl_divergence, ks_critical, ks_statistic,
                    order_flow_imbalance, return_stats, stylized_facts)
