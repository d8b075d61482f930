import math

from django.db import models, transaction

# Stored copies of benchmark sweeps. Files are always written; rows only with --save.


def _nullable(value):
    return None if value is None or (isinstance(value, float) and not math.isfinite(value)) else value


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, complex) or (isinstance(value, float) and not math.isfinite(value)):
        return repr(value)
    return value


class BenchmarkRun(models.Model):
    name = models.CharField(max_length=128, help_text="Preset or config name")
    scenario = models.JSONField(default=dict)
    sweep = models.JSONField(default=dict)
    seed = models.BigIntegerField(default=0)
    rng = models.CharField(max_length=128, blank=True, default='')
    trials = models.IntegerField(default=0)
    workers = models.IntegerField(default=1)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.name} (seed {self.seed})"


class BenchmarkPoint(models.Model):
    run = models.ForeignKey(BenchmarkRun, on_delete=models.CASCADE, related_name='points')
    index = models.IntegerField(default=0, help_text="Position of the point in the sweep")
    values = models.JSONField(default=dict, help_text="Sweep values of this point")
    nmse_x_db = models.FloatField(null=True, blank=True)
    nmse_theta_db = models.FloatField(null=True, blank=True)
    median_nmse_theta_db = models.FloatField(null=True, blank=True)
    p_correct = models.FloatField(null=True, blank=True)
    p_over = models.FloatField(null=True, blank=True)
    p_under = models.FloatField(null=True, blank=True)
    mean_runtime = models.FloatField(null=True, blank=True)
    failures = models.IntegerField(default=0)

    class Meta:
        ordering = ['run', 'index']

    def __str__(self):
        return f"{self.run_id}: {self.values}"


class TrialRecord(models.Model):
    point = models.ForeignKey(BenchmarkPoint, on_delete=models.CASCADE, related_name='trials')
    trial = models.IntegerField()
    K = models.IntegerField()
    K_hat = models.IntegerField()
    nmse_x_db = models.FloatField(null=True, blank=True)
    nmse_theta_db = models.FloatField(null=True, blank=True)
    order_correct = models.BooleanField(default=False)
    order_over = models.BooleanField(default=False)
    runtime = models.FloatField(default=0.0)
    failed = models.BooleanField(default=False)
    true_thetas = models.JSONField(default=list)
    est_thetas = models.JSONField(default=list)

    class Meta:
        ordering = ['point', 'trial']
        indexes = [
            models.Index(fields=['point', 'trial'], name='bench_point_trial_idx'),
        ]

    def __str__(self):
        return f"{self.point_id}#{self.trial}: K={self.K} K_hat={self.K_hat}"


def save_sweep(name, cfg, sweep, rows, rng_name, workers=1, per_trial=False):
    """Store a finished sweep and return the :class:`BenchmarkRun`."""
    with transaction.atomic():
        run = BenchmarkRun.objects.create(
            name=name,
            scenario=_json_safe(cfg.as_dict()),
            sweep=_json_safe(sweep),
            seed=cfg.rng_seed,
            rng=rng_name,
            trials=cfg.trials,
            workers=workers,
        )
        for index, row in enumerate(rows):
            point = BenchmarkPoint.objects.create(
                run=run,
                index=index,
                values=_json_safe(row.point),
                nmse_x_db=_nullable(row.nmse_x_db),
                nmse_theta_db=_nullable(row.nmse_theta_db),
                median_nmse_theta_db=_nullable(row.median_nmse_theta_db),
                p_correct=_nullable(row.p_correct),
                p_over=_nullable(row.p_over),
                p_under=_nullable(row.p_under),
                mean_runtime=_nullable(row.runtime),
                failures=row.failures,
            )
            if per_trial:
                TrialRecord.objects.bulk_create([
                    TrialRecord(
                        point=point,
                        trial=result.trial,
                        K=result.K,
                        K_hat=result.K_hat,
                        nmse_x_db=_nullable(result.nmse_x_db),
                        nmse_theta_db=_nullable(result.nmse_theta_db),
                        order_correct=result.order_correct,
                        order_over=result.order_over,
                        runtime=result.runtime_seconds,
                        failed=result.failed,
                        true_thetas=list(result.true_thetas),
                        est_thetas=list(result.est_thetas),
                    )
                    for result in row.results
                ])
    return run
