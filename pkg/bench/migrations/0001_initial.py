import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='BenchmarkRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(help_text='Preset or config name', max_length=128)),
                ('scenario', models.JSONField(default=dict)),
                ('sweep', models.JSONField(default=dict)),
                ('seed', models.BigIntegerField(default=0)),
                ('rng', models.CharField(blank=True, default='', max_length=128)),
                ('trials', models.IntegerField(default=0)),
                ('workers', models.IntegerField(default=1)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='BenchmarkPoint',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('index', models.IntegerField(default=0, help_text='Position of the point in the sweep')),
                ('values', models.JSONField(default=dict, help_text='Sweep values of this point')),
                ('nmse_x_db', models.FloatField(blank=True, null=True)),
                ('nmse_theta_db', models.FloatField(blank=True, null=True)),
                ('median_nmse_theta_db', models.FloatField(blank=True, null=True)),
                ('p_correct', models.FloatField(blank=True, null=True)),
                ('p_over', models.FloatField(blank=True, null=True)),
                ('p_under', models.FloatField(blank=True, null=True)),
                ('mean_runtime', models.FloatField(blank=True, null=True)),
                ('failures', models.IntegerField(default=0)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='points', to='bench.benchmarkrun')),
            ],
            options={
                'ordering': ['run', 'index'],
            },
        ),
        migrations.CreateModel(
            name='TrialRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('trial', models.IntegerField()),
                ('K', models.IntegerField()),
                ('K_hat', models.IntegerField()),
                ('nmse_x_db', models.FloatField(blank=True, null=True)),
                ('nmse_theta_db', models.FloatField(blank=True, null=True)),
                ('order_correct', models.BooleanField(default=False)),
                ('order_over', models.BooleanField(default=False)),
                ('runtime', models.FloatField(default=0.0)),
                ('failed', models.BooleanField(default=False)),
                ('true_thetas', models.JSONField(default=list)),
                ('est_thetas', models.JSONField(default=list)),
                ('point', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='trials', to='bench.benchmarkpoint')),
            ],
            options={
                'ordering': ['point', 'trial'],
                'indexes': [models.Index(fields=['point', 'trial'], name='bench_point_trial_idx')],
            },
        ),
    ]
