use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::messages::{Broadcast, Upload};
use super::{ByteCounts, FederationConfig, Packing, PhaseTimes, RoundMetrics, Strategy, Timing};
use crate::error::{Error, Result};
use crate::he::{add_lists, decrypt_unpack, modeled_ciphertext_bytes, pack_encrypt, Ciphertext, HeBackend, KeyPair};
use crate::linalg::Matrix;
use crate::netsim::{sae_encrypted_count, NetProfile, PLAINTEXT_BYTES_PER_ELEMENT};
use crate::prme::PruneState;
use crate::trainer::{local_train, DataShard, Dataset, ToyModel};

/// Per-client sub-seed so results do not depend on thread scheduling.
fn derive_seed(seed: u64, tag: &[u8], round: u64, client: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag);
    h.update(round.to_le_bytes());
    h.update((client as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Split of the flat gradient for select-and-encrypt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaeSelection {
    /// Sorted positions that are encrypted.
    pub encrypted: Vec<usize>,
    /// Sorted positions sent in the clear.
    pub plaintext: Vec<usize>,
}

/// Ranks trainable parameters by mean absolute per-sample gradient on a
/// calibration batch and encrypts the top `fraction`. Ties go to the lower
/// index.
pub fn sae_selection(model: &ToyModel, calibration: &Dataset, fraction: f64) -> Result<SaeSelection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("encrypt fraction {fraction} outside (0, 1]")));
    }
    if calibration.is_empty() {
        return Err(Error::Parameter("empty calibration batch".into()));
    }
    let len = model.trainable_len();
    let mut sens = vec![0.0; len];
    for i in 0..calibration.len() {
        let one = calibration.subset(&[i]);
        let (_, grads) = model.loss_and_gradients(one.features(), one.labels())?;
        for (s, g) in sens.iter_mut().zip(model.trainable_gradient(&grads)?) {
            *s += g.abs();
        }
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| sens[b].total_cmp(&sens[a]).then(a.cmp(&b)));
    let k = sae_encrypted_count(len, fraction);
    let mut encrypted = order[..k].to_vec();
    let mut plaintext = order[k..].to_vec();
    encrypted.sort_unstable();
    plaintext.sort_unstable();
    Ok(SaeSelection { encrypted, plaintext })
}

/// Server-side aggregation: slot-wise sum of every upload, then `× 1/K`.
/// Plaintext parts (select-and-encrypt) are averaged the same way.
pub fn aggregate(backend: &dyn HeBackend, round: u64, uploads: &[Upload]) -> Result<Broadcast> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::protocol(None, "no uploads to aggregate"))?;
    let plain_len = |u: &Upload| u.plaintext_grads.as_ref().map(Vec::len);
    for u in uploads {
        if u.round != round {
            return Err(Error::protocol(
                Some(u.client_id),
                format!("upload for round {} during round {round}", u.round),
            ));
        }
        if u.ciphertexts.len() != first.ciphertexts.len() || u.packed_len != first.packed_len {
            return Err(Error::protocol(
                Some(u.client_id),
                format!(
                    "{} values in {} ciphertexts, client {} sent {} in {}",
                    u.packed_len,
                    u.ciphertexts.len(),
                    first.client_id,
                    first.packed_len,
                    first.ciphertexts.len()
                ),
            ));
        }
        if plain_len(u) != plain_len(first) {
            return Err(Error::protocol(Some(u.client_id), "plaintext part does not match"));
        }
    }
    let inv_k = 1.0 / uploads.len() as f64;
    let mut sum = first.ciphertexts.clone();
    for u in &uploads[1..] {
        sum = add_lists(backend, &sum, &u.ciphertexts)
            .map_err(|e| Error::protocol(Some(u.client_id), e.to_string()))?;
    }
    let ciphertexts = sum
        .iter()
        .map(|c| backend.scale_plain(c, inv_k))
        .collect::<Result<Vec<_>>>()?;
    let plaintext_grads = first.plaintext_grads.as_ref().map(|p0| {
        let mut acc = p0.clone();
        for u in &uploads[1..] {
            let p = u.plaintext_grads.as_ref().expect("presence checked above");
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        acc.iter().map(|a| a * inv_k).collect()
    });
    Ok(Broadcast {
        round,
        packed_len: first.packed_len,
        ciphertexts,
        plaintext_grads,
    })
}

/// A client: its copy of the model, its pruning state, its data and the
/// shared key pair.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    model: ToyModel,
    prune: Option<PruneState>,
    shard: DataShard,
    keys: KeyPair,
}

/// Holds ciphertexts only; there is no secret key here.
#[derive(Debug, Clone)]
pub struct ServerState {
    round: u64,
    client_count: usize,
    strategy: Strategy,
    buffer: Vec<Ciphertext>,
}

impl ServerState {
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn client_count(&self) -> usize {
        self.client_count
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Last broadcast aggregate.
    pub fn buffer(&self) -> &[Ciphertext] {
        &self.buffer
    }

    fn aggregate(&mut self, backend: &dyn HeBackend, round: u64, uploads: &[Upload]) -> Result<Broadcast> {
        if uploads.len() != self.client_count {
            return Err(Error::protocol(
                None,
                format!("{} uploads from {} clients", uploads.len(), self.client_count),
            ));
        }
        let b = aggregate(backend, round, uploads)?;
        self.buffer = b.ciphertexts.clone();
        self.round = round;
        Ok(b)
    }
}

struct RoundCtx<'a> {
    round: u64,
    config: &'a FederationConfig,
    backend: &'a dyn HeBackend,
    sae: Option<&'a SaeSelection>,
}

struct ClientOutput {
    message: Vec<u8>,
    train_wall: f64,
    encrypt_wall: f64,
    loss: f64,
    samples: usize,
}

struct ClientFinish {
    decrypt_wall: f64,
    update_wall: f64,
}

impl ClientState {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn prune(&self) -> Option<&PruneState> {
        self.prune.as_ref()
    }

    pub fn shard(&self) -> &DataShard {
        &self.shard
    }

    fn prepare_upload(&mut self, ctx: &RoundCtx<'_>) -> Result<ClientOutput> {
        let t0 = Instant::now();
        let update = local_train(&self.model, &self.shard, &ctx.config.train)?;
        let train_wall = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let (packed, plain) = match ctx.config.strategy {
            Strategy::DictPfl => {
                let prune = self.prune.as_mut().expect("DictPFL clients carry pruning state");
                prune.begin_round(ctx.round)?;
                let (table, bias) = update.grad.split_at(prune.len());
                let sel = prune.accumulate_and_select(table)?;
                let mut v = match ctx.config.packing {
                    Packing::Compacted => sel.values,
                    Packing::Padded => sel.to_dense(),
                };
                v.extend_from_slice(bias);
                (v, None)
            }
            Strategy::FedHeFull | Strategy::FedHeTopK(_) => (update.grad, None),
            Strategy::SaE(_) => {
                let sel = ctx.sae.ok_or_else(|| {
                    Error::Parameter("select-and-encrypt needs a calibration batch".into())
                })?;
                let g = &update.grad;
                (
                    sel.encrypted.iter().map(|&i| g[i]).collect(),
                    Some(sel.plaintext.iter().map(|&i| g[i]).collect()),
                )
            }
        };
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(ctx.config.seed, b"encrypt", ctx.round, self.id));
        let ciphertexts = pack_encrypt(ctx.backend, &self.keys.public, &packed, &mut rng)
            .map_err(|e| Error::protocol(Some(self.id), format!("encryption failed: {e}")))?;
        let upload = Upload {
            client_id: self.id,
            round: ctx.round,
            packed_len: packed.len(),
            ciphertexts,
            plaintext_grads: plain,
        };
        let message = upload.to_bytes();
        Ok(ClientOutput {
            message,
            train_wall,
            encrypt_wall: t1.elapsed().as_secs_f64(),
            loss: update.loss,
            samples: update.samples,
        })
    }

    /// Scatters the decrypted aggregate back into the flat trainable layout.
    fn unpack(&self, ctx: &RoundCtx<'_>, values: Vec<f64>, plain: Option<Vec<f64>>) -> Result<Vec<f64>> {
        let len = self.model.trainable_len();
        let misaligned = |expected: usize| {
            Error::protocol(
                Some(self.id),
                format!("aggregate carries {} values, local layout expects {expected}", values.len()),
            )
        };
        match ctx.config.strategy {
            Strategy::DictPfl => {
                let prune = self.prune.as_ref().expect("DictPFL clients carry pruning state");
                let wlen = prune.len();
                match ctx.config.packing {
                    Packing::Padded => {
                        if values.len() != len {
                            return Err(misaligned(len));
                        }
                        Ok(values)
                    }
                    Packing::Compacted => {
                        let active = prune.active_indices();
                        let expected = active.len() + (len - wlen);
                        if values.len() != expected {
                            return Err(misaligned(expected));
                        }
                        let mut dense = vec![0.0; len];
                        for (&i, &v) in active.iter().zip(&values) {
                            dense[i] = v;
                        }
                        dense[wlen..].copy_from_slice(&values[active.len()..]);
                        Ok(dense)
                    }
                }
            }
            Strategy::FedHeFull | Strategy::FedHeTopK(_) => {
                if values.len() != len {
                    return Err(misaligned(len));
                }
                Ok(values)
            }
            Strategy::SaE(_) => {
                let sel = ctx.sae.expect("checked when uploading");
                let plain = plain.unwrap_or_default();
                if values.len() != sel.encrypted.len() {
                    return Err(misaligned(sel.encrypted.len()));
                }
                if plain.len() != sel.plaintext.len() {
                    return Err(Error::protocol(Some(self.id), "plaintext part does not match"));
                }
                let mut dense = vec![0.0; len];
                for (&i, v) in sel.encrypted.iter().zip(values) {
                    dense[i] = v;
                }
                for (&i, v) in sel.plaintext.iter().zip(plain) {
                    dense[i] = v;
                }
                Ok(dense)
            }
        }
    }

    fn apply_broadcast(&mut self, ctx: &RoundCtx<'_>, message: &[u8]) -> Result<ClientFinish> {
        let t0 = Instant::now();
        let b = Broadcast::from_bytes(message)?;
        if b.round != ctx.round {
            return Err(Error::protocol(
                Some(self.id),
                format!("broadcast for round {} during round {}", b.round, ctx.round),
            ));
        }
        let values = decrypt_unpack(ctx.backend, &self.keys.secret, &b.ciphertexts, b.packed_len)?;
        let decrypt_wall = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let global = self.unpack(ctx, values, b.plaintext_grads)?;
        self.model.apply_update(&global, ctx.config.train.lr)?;
        if let Some(prune) = self.prune.as_mut() {
            let wlen = prune.len();
            prune.observe_global(&global[..wlen])?;
        }
        Ok(ClientFinish {
            decrypt_wall,
            update_wall: t1.elapsed().as_secs_f64(),
        })
    }
}

/// A full simulated federation: `K` clients, one server, one network.
#[derive(Debug)]
pub struct Federation {
    config: FederationConfig,
    backend: Arc<dyn HeBackend>,
    net: NetProfile,
    clients: Vec<ClientState>,
    server: ServerState,
    eval: Dataset,
    sae: Option<SaeSelection>,
    pool: rayon::ThreadPool,
}

fn concat(shards: &[DataShard]) -> Result<Dataset> {
    let d = shards[0].data.dim();
    let n: usize = shards.iter().map(|s| s.data.len()).sum();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for s in shards {
        data.extend_from_slice(s.data.features().data());
        labels.extend_from_slice(s.data.labels());
    }
    Dataset::new(Matrix::new(n, d, data)?, labels, shards[0].data.classes())
}

impl Federation {
    /// Prepares every client's model from `base` for the configured strategy
    /// and issues the shared key pair. The evaluation set defaults to the
    /// union of the shards.
    pub fn new(
        config: FederationConfig,
        backend: Arc<dyn HeBackend>,
        net: NetProfile,
        base: &ToyModel,
        shards: Vec<DataShard>,
    ) -> Result<Self> {
        config.validate()?;
        if shards.is_empty() {
            return Err(Error::Parameter("a federation needs at least one client".into()));
        }
        for s in &shards {
            if s.data.dim() != base.input_dim() {
                return Err(Error::shape(
                    "Federation::new",
                    format!("client {} has {}-wide features, model expects {}", s.owner, s.data.dim(), base.input_dim()),
                ));
            }
        }
        let all = base.train_last(base.depth())?;
        let model = match config.strategy {
            Strategy::DictPfl => all.factorize(config.rank)?,
            Strategy::FedHeFull | Strategy::SaE(_) => all,
            Strategy::FedHeTopK(k) => base.train_last(k)?,
        };
        let prune = match config.strategy {
            Strategy::DictPfl => Some(PruneState::new(config.prune, model.trainable_weight_len())?),
            _ => None,
        };
        // key authority
        let keys = backend.keygen(derive_seed(config.seed, b"keygen", 0, 0))?;
        let eval = concat(&shards)?;
        let k = shards.len();
        let threads = if config.threads == 0 {
            k.min(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        } else {
            config.threads
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState {
                id,
                model: model.clone(),
                prune: prune.clone(),
                shard,
                keys: keys.clone(),
            })
            .collect();
        Ok(Self {
            server: ServerState {
                round: 0,
                client_count: k,
                strategy: config.strategy,
                buffer: Vec::new(),
            },
            config,
            backend,
            net,
            clients,
            eval,
            sae: None,
            pool,
        })
    }

    /// Replaces the evaluation set used for the per-round loss and accuracy.
    pub fn with_eval(mut self, eval: Dataset) -> Result<Self> {
        if eval.dim() != self.model().input_dim() || eval.is_empty() {
            return Err(Error::shape("Federation::with_eval", "evaluation set does not fit the model"));
        }
        self.eval = eval;
        Ok(self)
    }

    /// Fixes the select-and-encrypt mask from a public calibration batch,
    /// scored on the shared initial model.
    pub fn with_calibration(mut self, calibration: &Dataset) -> Result<Self> {
        if let Strategy::SaE(f) = self.config.strategy {
            self.sae = Some(sae_selection(&self.clients[0].model, calibration, f)?);
        }
        Ok(self)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn sae(&self) -> Option<&SaeSelection> {
        self.sae.as_ref()
    }

    /// The global model (every client holds an identical copy).
    pub fn model(&self) -> &ToyModel {
        &self.clients[0].model
    }

    pub fn round(&self) -> u64 {
        self.server.round
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundMetrics>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.server.round + 1;
        let Federation {
            config,
            backend,
            net,
            clients,
            server,
            eval,
            sae,
            pool,
        } = self;
        let ctx = RoundCtx {
            round,
            config,
            backend: backend.as_ref(),
            sae: sae.as_ref(),
        };
        let k = clients.len() as u64;

        let outputs: Vec<ClientOutput> =
            pool.install(|| clients.par_iter_mut().map(|c| c.prepare_upload(&ctx)).collect::<Result<_>>())?;

        let uploads = outputs
            .iter()
            .map(|o| Upload::from_bytes(&o.message))
            .collect::<Result<Vec<_>>>()?;
        let t_agg = Instant::now();
        let broadcast = server.aggregate(ctx.backend, round, &uploads)?;
        let aggregate_wall = t_agg.elapsed().as_secs_f64();
        let message = broadcast.to_bytes();

        let finishes: Vec<ClientFinish> = pool.install(|| {
            clients
                .par_iter_mut()
                .map(|c| c.apply_broadcast(&ctx, &message))
                .collect::<Result<_>>()
        })?;

        let c_up = uploads[0].ciphertexts.len() as u64;
        let c_down = broadcast.ciphertexts.len() as u64;
        let plain = uploads[0].plaintext_grads.as_ref().map_or(0, Vec::len) as u64;
        let ct_size = modeled_ciphertext_bytes(&config.accounting);
        let per_client_up = c_up * ct_size + plain * PLAINTEXT_BYTES_PER_ELEMENT;
        let per_client_down = c_down * ct_size + plain * PLAINTEXT_BYTES_PER_ELEMENT;
        let bytes = ByteCounts {
            ciphertext_up: k * c_up * ct_size,
            ciphertext_down: k * c_down * ct_size,
            plaintext_up: k * plain * PLAINTEXT_BYTES_PER_ELEMENT,
            plaintext_down: k * plain * PLAINTEXT_BYTES_PER_ELEMENT,
        };

        let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);
        let model = &clients[0].model;
        let costs = &config.costs;
        let times = match config.timing {
            Timing::Modeled => {
                let samples = outputs.iter().map(|o| o.samples).max().unwrap_or(0) as f64;
                PhaseTimes {
                    local_train: samples * model.macs_per_sample() as f64 * costs.train_s_per_mac,
                    encrypt: c_up as f64 * costs.encrypt_s_per_ct,
                    upload: net.upload_time(per_client_up),
                    aggregate: (k - 1) as f64 * c_up as f64 * costs.add_s_per_ct
                        + c_down as f64 * costs.scale_s_per_ct,
                    download: net.download_time(per_client_down),
                    decrypt: c_down as f64 * costs.decrypt_s_per_ct,
                    update: model.trainable_len() as f64 * costs.update_s_per_param,
                }
            }
            Timing::Measured => PhaseTimes {
                local_train: max(&mut outputs.iter().map(|o| o.train_wall)),
                encrypt: max(&mut outputs.iter().map(|o| o.encrypt_wall)),
                upload: net.upload_time(per_client_up),
                aggregate: aggregate_wall,
                download: net.download_time(per_client_down),
                decrypt: max(&mut finishes.iter().map(|f| f.decrypt_wall)),
                update: max(&mut finishes.iter().map(|f| f.update_wall)),
            },
        };

        let (loss, accuracy) = model.evaluate(eval)?;
        Ok(RoundMetrics {
            round,
            times,
            bytes,
            ciphertexts_up: k * c_up,
            ciphertexts_broadcast: c_down,
            encrypted_elements: uploads[0].packed_len as u64,
            plaintext_elements: plain,
            train_loss: outputs.iter().map(|o| o.loss).sum::<f64>() / k as f64,
            loss,
            accuracy,
        })
    }
}
